"""Source-domain feature statistics, precomputed once per trained network."""

from collections import OrderedDict
from typing import Any, Dict, List, NamedTuple, Sequence

import numpy as np
from tqdm import tqdm

from cdbuffer import errors, io
from cdbuffer.dataset import ToyDataset
from cdbuffer.discrepancy import METRICS, image_discrepancy, instance_discrepancy
from cdbuffer.model import ToyNet, roi_crop, scale_boxes
from cdbuffer.tensor import Tensor, no_grad
from cdbuffer.util import Path, log, progress_disabled

_FIELDS = ('image_mean', 'instance_mean', 'dist_mean', 'dist_std',
           'image_scale', 'instance_scale')


class LayerStats(NamedTuple):
    """Statistics of one BN layer's input on the source domain.

    ``image_scales`` / ``instance_scales`` hold, per metric (ordered as
    :data:`cdbuffer.discrepancy.METRICS`), the mean over channels of the
    source's own deviation from its mean. They are the reference scales
    the discrepancy normalizer divides by.
    """

    image_mean: np.ndarray      # [C, H, W]
    instance_mean: np.ndarray   # [C, h, w]
    dist_mean: np.ndarray       # [C]
    dist_std: np.ndarray        # [C]
    image_scales: np.ndarray    # [len(METRICS)]
    instance_scales: np.ndarray  # [len(METRICS)]

    def image_scale(self, metric: str = 'l1') -> float:
        return float(self.image_scales[METRICS.index(metric)])

    def instance_scale(self, metric: str = 'l1') -> float:
        return float(self.instance_scales[METRICS.index(metric)])

    @property
    def channels(self) -> int:
        return self.dist_mean.shape[0]


class SourceStats:
    """Per-layer source statistics plus provenance metadata.

    Args:
        layers (OrderedDict): Layer name -> :class:`LayerStats`, in tap order.
        meta (dict): network_hash, dataset_seed, n_images, n_instances,
            instance_size, image_size.
    """

    def __init__(self, layers: "OrderedDict[str, LayerStats]",
                 meta: Dict[str, Any]) -> None:
        self.layers = layers
        self.meta = dict(meta)
        for name, ls in layers.items():
            if np.any(ls.dist_std < 0):
                raise errors.StatsError(f'Negative std in layer {name}')

    def __repr__(self) -> str:
        return (f"SourceStats(layers={len(self.layers)}, "
                f"n_images={self.meta.get('n_images')}, "
                f"n_instances={self.meta.get('n_instances')})")

    @property
    def layer_names(self) -> List[str]:
        return list(self.layers.keys())

    @property
    def image_size(self) -> int:
        return int(self.meta['image_size'])

    @property
    def instance_size(self) -> int:
        return int(self.meta['instance_size'])

    def check_layers(self, names: Sequence[str]) -> None:
        if list(names) != self.layer_names:
            raise errors.ConfigError(
                f'Layer mismatch between features ({list(names)}) and source '
                f'statistics ({self.layer_names})')

    def check_compatible(self, net: ToyNet) -> None:
        """Raise ConfigError unless every layer shape matches ``net``."""
        shapes = net.tap_shapes(self.image_size)
        self.check_layers(list(shapes.keys()))
        for name, shape in shapes.items():
            have = self.layers[name].image_mean.shape
            if tuple(have) != tuple(shape):
                raise errors.ConfigError(
                    f'Source statistics for {name} have shape {have}; the '
                    f'network produces {shape}')
        if self.meta.get('network_hash') not in (None, net.hash()):
            log.warning('Source statistics were computed for a different '
                        'set of network weights')

    # --- Persistence --------------------------------------------------------
    def save(self, path: Path) -> None:
        arrays = OrderedDict()  # type: OrderedDict[str, np.ndarray]
        for name, ls in self.layers.items():
            arrays[f'{name}/image_mean'] = ls.image_mean
            arrays[f'{name}/instance_mean'] = ls.instance_mean
            arrays[f'{name}/dist_mean'] = ls.dist_mean
            arrays[f'{name}/dist_std'] = ls.dist_std
            arrays[f'{name}/image_scale'] = ls.image_scales
            arrays[f'{name}/instance_scale'] = ls.instance_scales
        meta = dict(self.meta, layers=self.layer_names, metrics=list(METRICS))
        io.write_arrays(path, io.STATS_FORMAT, arrays, meta)
        log.info(f'Saved source statistics ({len(self.layers)} layers) to {path}')

    @classmethod
    def load(cls, path: Path) -> "SourceStats":
        arrays, meta = io.read_arrays(path, io.STATS_FORMAT)
        if meta.get('metrics', list(METRICS)) != list(METRICS):
            raise errors.RecordError(
                f"{path}: unsupported metric order {meta.get('metrics')}")
        layers = OrderedDict()  # type: OrderedDict[str, LayerStats]
        for name in meta.get('layers', []):
            try:
                layers[name] = LayerStats(
                    *(arrays[f'{name}/{field}'] for field in _FIELDS))
            except KeyError as e:
                raise errors.RecordError(f'{path} is missing array {e}')
        meta = {k: v for k, v in meta.items() if k not in ('layers', 'metrics')}
        return cls(layers, meta)


class _RunningMoments:
    """Per-channel mean and sum of squared deviations, merged batchwise."""

    def __init__(self, channels: int) -> None:
        self.count = 0
        self.mean = np.zeros(channels)
        self.m2 = np.zeros(channels)

    def update(self, x: np.ndarray) -> None:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        b_mean = x.mean(axis=(0, 2, 3))
        b_m2 = np.square(x - b_mean[None, :, None, None]).sum(axis=(0, 2, 3))
        total = self.count + n
        delta = b_mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + b_m2 + np.square(delta) * (self.count * n / total)
        self.count = total

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.m2 / self.count, 0.0))


class _RunningMean:
    """Elementwise mean over a stream of stacked samples."""

    def __init__(self, shape) -> None:
        self.count = 0
        self.mean = np.zeros(shape)

    def update(self, x: np.ndarray) -> None:
        n = x.shape[0]
        if not n:
            return
        total = self.count + n
        self.mean = self.mean + (x.mean(axis=0) - self.mean) * (n / total)
        self.count = total


def _tap_batches(net: ToyNet, dataset: ToyDataset, batch_size: int, desc: str):
    pb = tqdm(total=len(dataset), unit='img', desc=desc, leave=False,
              disable=progress_disabled())
    with no_grad():
        for idx in dataset.batches(batch_size):
            _, taps = net.forward_with_taps(Tensor(dataset.pixels(idx)),
                                            training=False)
            pb.update(len(idx))
            yield idx, taps
    pb.close()


def _crops(tap: Tensor, boxes, image_size: int, size: int) -> np.ndarray:
    factor = tap.shape[2] / image_size
    crops, _ = roi_crop(tap, scale_boxes(boxes, factor), size, size)
    return crops.data


def precompute_stats(
    net: ToyNet,
    dataset: ToyDataset,
    batch_size: int = 64,
    instance_size: int = 4,
    reference_scales: bool = True
) -> SourceStats:
    """Stream the source dataset through ``net`` (eval mode, no buffers).

    The first pass accumulates the per-layer image mean map, the mean
    instance crop and per-channel moments of the BN inputs. A second pass
    measures the source's own deviation from those means, which becomes
    the reference scale of the discrepancy normalizer.

    Args:
        net (ToyNet): Trained source network.
        dataset (ToyDataset): Clean source data with boxes.
        batch_size (int): Images per forward. Defaults to 64.
        instance_size (int): Side of the RoI crops. Defaults to 4.
        reference_scales (bool): Run the second pass. When False the
            scales are zero and the per-batch normalizer is used.

    Returns:
        SourceStats
    """
    if not len(dataset):
        raise errors.EmptyDatasetError('source dataset')
    image_size = int(dataset.pixels([0]).shape[-1])
    images = OrderedDict()  # type: OrderedDict[str, _RunningMean]
    instances = OrderedDict()  # type: OrderedDict[str, _RunningMean]
    moments = OrderedDict()  # type: OrderedDict[str, _RunningMoments]

    for idx, taps in _tap_batches(net, dataset, batch_size, 'Source stats'):
        boxes = dataset.boxes(idx)
        for name, tap in taps.items():
            if name not in images:
                c = tap.shape[1]
                images[name] = _RunningMean(tap.shape[1:])
                instances[name] = _RunningMean((c, instance_size, instance_size))
                moments[name] = _RunningMoments(c)
            images[name].update(tap.data)
            instances[name].update(_crops(tap, boxes, image_size, instance_size))
            moments[name].update(tap.data)

    n_instances = next(iter(instances.values())).count
    if not n_instances:
        log.warning('No usable instance boxes in the source dataset; '
                    'instance statistics are zero')

    image_dev = OrderedDict(
        (name, np.zeros((len(METRICS), len(dataset)))) for name in images)
    inst_dev = OrderedDict(
        (name, [[] for _ in METRICS]) for name in images)  # type: Dict[str, List[List[np.ndarray]]]
    if reference_scales:
        for idx, taps in _tap_batches(net, dataset, batch_size, 'Source scales'):
            boxes = dataset.boxes(idx)
            for name, tap in taps.items():
                crops = _crops(tap, boxes, image_size, instance_size)
                for m, metric in enumerate(METRICS):
                    for j, i in enumerate(idx):
                        image_dev[name][m, i] = np.mean(image_discrepancy(
                            tap.data[j:j + 1], images[name].mean, metric))
                    for crop in crops:
                        vec, _ = instance_discrepancy(
                            crop[None], instances[name].mean, metric)
                        inst_dev[name][m].append(np.mean(vec))

    layers = OrderedDict()  # type: OrderedDict[str, LayerStats]
    for name in images:
        if reference_scales:
            image_scales = image_dev[name].mean(axis=1)
            instance_scales = np.array(
                [np.mean(v) if v else 0.0 for v in inst_dev[name]])
        else:
            image_scales = np.zeros(len(METRICS))
            instance_scales = np.zeros(len(METRICS))
        layers[name] = LayerStats(
            image_mean=images[name].mean,
            instance_mean=instances[name].mean,
            dist_mean=moments[name].mean,
            dist_std=moments[name].std,
            image_scales=image_scales,
            instance_scales=instance_scales)

    meta = {
        'network_hash': net.hash(),
        'dataset_seed': dataset.seed,
        'dataset_fingerprint': dataset.fingerprint(),
        'n_images': len(dataset),
        'n_instances': int(n_instances),
        'instance_size': int(instance_size),
        'image_size': image_size,
    }
    log.info(f'Computed source statistics for {len(layers)} layers over '
             f'{len(dataset)} images and {n_instances} instances')
    return SourceStats(layers, meta)
