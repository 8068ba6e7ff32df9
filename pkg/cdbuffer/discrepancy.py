"""Per-channel feature discrepancy between target batches and source means.

Image-level terms compare whole BN-input feature maps against the source
mean map; instance-level terms compare RoI crops against the source mean
crop. Both are reduced per channel, normalized and summed.
"""

from collections import OrderedDict
from typing import TYPE_CHECKING, Dict, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from cdbuffer import errors
from cdbuffer.model.roi import roi_crop, scale_boxes
from cdbuffer.tensor import Tensor
from cdbuffer.util import Box, events

if TYPE_CHECKING:
    from cdbuffer.stats import SourceStats

METRICS = ('l1', 'l2', 'cosine')
NORMALIZERS = ('source', 'batch')
ZERO_GUARD = 1e-12

Array = Union[Tensor, np.ndarray]


def _values(x: Array) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _channel_distance(target: np.ndarray, source: np.ndarray,
                      metric: str) -> np.ndarray:
    """Per-channel distance of [N, C, H, W] samples from a [C, H, W] mean."""
    diff = target - source[None]
    if metric == 'l1':
        return np.abs(diff).mean(axis=(0, 2, 3))
    if metric == 'l2':
        return np.sqrt(np.square(diff).mean(axis=(0, 2, 3)))
    if metric == 'cosine':
        t = target.reshape(target.shape[0], target.shape[1], -1)
        s = source.reshape(1, source.shape[0], -1)
        dot = (t * s).sum(axis=2)
        norms = np.linalg.norm(t, axis=2) * np.linalg.norm(s, axis=2)
        cos = np.where(norms > ZERO_GUARD, dot / np.maximum(norms, ZERO_GUARD), 1.0)
        return np.clip(1.0 - cos, 0.0, 2.0).mean(axis=0)
    raise errors.ConfigError(
        f"Unknown discrepancy metric {metric!r}; choose from {', '.join(METRICS)}")


def image_discrepancy(
    taps_t: Array,
    source_mean: Array,
    metric: str = 'l1'
) -> np.ndarray:
    """Mean |X_t - X_s| per channel over batch and spatial positions."""
    x, s = _values(taps_t), _values(source_mean)
    if x.ndim != 4 or x.shape[0] == 0:
        raise errors.DimensionError(
            f'image_discrepancy needs a nonempty [N,C,H,W] batch, got {x.shape}')
    if x.shape[1:] != s.shape:
        raise errors.DimensionError(
            f'image_discrepancy: target axes 1-3 {x.shape[1:]} do not match '
            f'source mean {s.shape}')
    return _channel_distance(x, s, metric)


def instance_discrepancy(
    inst_t: Array,
    source_instance_mean: Array,
    metric: str = 'l1'
) -> Tuple[np.ndarray, bool]:
    """Per-channel distance of RoI crops from the source mean crop.

    Returns:
        Tuple of the [C] vector and an instance-absent flag (True when no
        crops were given; the vector is then all zeros).
    """
    x, s = _values(inst_t), _values(source_instance_mean)
    if x.ndim != 4 or x.shape[1:] != s.shape:
        raise errors.DimensionError(
            f'instance_discrepancy: crops {x.shape} do not match source '
            f'instance mean {s.shape}')
    if x.shape[0] == 0:
        return np.zeros(s.shape[0]), True
    return _channel_distance(x, s, metric), False


def normalize(v: np.ndarray, scale: Optional[float] = None) -> np.ndarray:
    """Divide by ``scale``, or by the vector's own mean when no usable
    scale is given (both zero-guarded)."""
    if scale is None or not scale > ZERO_GUARD:
        scale = float(np.mean(v))
    return v / max(scale, ZERO_GUARD)


def combine(
    d_image: np.ndarray,
    d_instance: np.ndarray,
    instance_absent: bool = False,
    image_scale: Optional[float] = None,
    instance_scale: Optional[float] = None
) -> np.ndarray:
    """Sum of the normalized image- and instance-level vectors.

    Without reference scales each vector is normalized to unit mean over
    its channels. With no instances the image term is doubled so the
    scale matches the two-term case.
    """
    d_image = np.asarray(d_image, dtype=np.float64)
    d_instance = np.asarray(d_instance, dtype=np.float64)
    if d_image.shape != d_instance.shape:
        raise errors.DimensionError(
            f'combine: image {d_image.shape} vs instance {d_instance.shape}')
    img = normalize(d_image, image_scale)
    if instance_absent:
        return 2.0 * img
    return img + normalize(d_instance, instance_scale)


def layer_aggregate(d: np.ndarray) -> float:
    d = np.asarray(d, dtype=np.float64)
    if d.size == 0:
        raise errors.DimensionError('layer_aggregate of an empty vector')
    return float(np.mean(d))


class LayerDiscrepancy(NamedTuple):
    image: np.ndarray
    instance: np.ndarray
    combined: np.ndarray
    layer: float
    instance_absent: bool


class DiscrepancyScore(OrderedDict):
    """Layer name -> :class:`LayerDiscrepancy`, in tap order."""

    def combined(self) -> Dict[str, np.ndarray]:
        return OrderedDict((k, v.combined) for k, v in self.items())

    def layer_values(self) -> Dict[str, float]:
        return OrderedDict((k, v.layer) for k, v in self.items())

    def mean(self) -> float:
        """Network discrepancy: the layer aggregates averaged over layers."""
        return float(np.mean([v.layer for v in self.values()]))


def score(
    taps: Mapping[str, Tensor],
    boxes: Sequence[Sequence[Box]],
    stats: "SourceStats",
    metric: str = 'l1',
    norm: str = 'source'
) -> DiscrepancyScore:
    """Discrepancy of every tapped layer for one batch.

    Boxes are in image pixel coordinates and are rescaled to each layer's
    resolution before cropping.
    """
    if norm not in NORMALIZERS:
        raise errors.ConfigError(
            f"Unknown normalizer {norm!r}; choose from {', '.join(NORMALIZERS)}")
    stats.check_layers(list(taps.keys()))
    result = DiscrepancyScore()
    size = stats.instance_size
    for name, tap in taps.items():
        ref = stats.layers[name]
        d_img = image_discrepancy(tap, ref.image_mean, metric)
        factor = tap.shape[2] / stats.image_size
        crops, _ = roi_crop(tap, scale_boxes(boxes, factor), size, size)
        d_inst, absent = instance_discrepancy(crops, ref.instance_mean, metric)
        if absent:
            events.hit('instance_absent')
        if norm == 'source':
            combined = combine(d_img, d_inst, absent,
                               ref.image_scale(metric), ref.instance_scale(metric))
        else:
            combined = combine(d_img, d_inst, absent)
        result[name] = LayerDiscrepancy(d_img, d_inst, combined,
                                        layer_aggregate(combined), absent)
    return result
