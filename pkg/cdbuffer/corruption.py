"""Severity-graded image corruptions and severity ladders.

Every corruption maps severity 0 to the exact identity, leaves labels
and boxes untouched and clamps pixels to [0, 1]. Random draws come from
a stream keyed by (seed, kind), separate from dataset generation, so
cells of a severity sweep share both base images and noise directions.
"""

from collections import OrderedDict
from typing import Callable, Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from cdbuffer import errors
from cdbuffer.dataset import LabeledImage, ToyDataset, gen_dataset
from cdbuffer.util import log, rng as make_rng

STREAM_CORRUPT = 23

HAZE_LEVEL = 0.7
HAZE_CAP = 0.8
NOISE_SCALE = 0.5
BRIGHTNESS_SCALE = 0.6


class CorruptionSpec(NamedTuple):
    kind: str
    severity: float
    seed: int = 0


def blur_size(severity: float) -> int:
    """Box-filter width 1 + 2*round(3*severity), rounding half up."""
    return 1 + 2 * int(np.floor(3 * severity + 0.5))


def gaussian_noise(pixels: np.ndarray, severity: float,
                   rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal(pixels.shape)
    return pixels + NOISE_SCALE * severity * z


def brightness_shift(pixels: np.ndarray, severity: float,
                     rng: np.random.Generator) -> np.ndarray:
    return pixels + BRIGHTNESS_SCALE * severity


def box_blur(pixels: np.ndarray, severity: float,
             rng: np.random.Generator) -> np.ndarray:
    k = blur_size(severity)
    return ndimage.uniform_filter(pixels, size=(1, k, k), mode='nearest')


def haze_mix(pixels: np.ndarray, severity: float,
             rng: np.random.Generator) -> np.ndarray:
    w = HAZE_CAP * severity
    return (1 - w) * pixels + w * HAZE_LEVEL


CORRUPTIONS = OrderedDict([
    ('gaussian_noise', gaussian_noise),
    ('brightness_shift', brightness_shift),
    ('box_blur', box_blur),
    ('haze_mix', haze_mix),
])  # type: Dict[str, Callable[[np.ndarray, float, np.random.Generator], np.ndarray]]

KINDS = tuple(CORRUPTIONS.keys())


def validate_spec(spec: CorruptionSpec) -> None:
    if spec.kind not in CORRUPTIONS:
        raise errors.CorruptionError(
            f"Unknown corruption {spec.kind!r}; choose from {', '.join(KINDS)}")
    if not 0.0 <= spec.severity <= 1.0:
        raise errors.CorruptionError(
            f'Severity must be in [0, 1], got {spec.severity}')


def _stream(spec: CorruptionSpec) -> np.random.Generator:
    return make_rng(spec.seed, STREAM_CORRUPT, KINDS.index(spec.kind))


def corrupt(
    img: LabeledImage,
    spec: CorruptionSpec,
    rng: Optional[np.random.Generator] = None
) -> LabeledImage:
    """Apply one corruption to one image.

    Without ``rng`` the draws come from the corruption's own stream, so the
    result depends only on (image, spec).
    """
    validate_spec(spec)
    if spec.severity == 0:
        return img
    if rng is None:
        rng = _stream(spec)
    out = CORRUPTIONS[spec.kind](img.pixels, spec.severity, rng)
    return LabeledImage(np.clip(out, 0.0, 1.0), img.label, img.boxes)


def corrupt_dataset(dataset: ToyDataset, spec: CorruptionSpec) -> ToyDataset:
    """Corrupt every image, drawing sequentially from the corruption's stream."""
    validate_spec(spec)
    if spec.severity == 0:
        return dataset.replace_pixels([img.pixels for img in dataset])
    rng = _stream(spec)
    return dataset.replace_pixels(
        [corrupt(img, spec, rng).pixels for img in dataset])


def severity_ladder(
    kinds: Sequence[str],
    severities: Sequence[float],
    n_per_cell: int,
    seed: int,
    base: Optional[ToyDataset] = None
) -> "OrderedDict[Tuple[str, float], ToyDataset]":
    """One corrupted copy of a shared clean base set per (kind, severity).

    Cells are ordered by kind then severity, as given.
    """
    if base is None:
        base = gen_dataset(n_per_cell, seed)
    fingerprint = base.fingerprint()
    cells = OrderedDict()  # type: OrderedDict[Tuple[str, float], ToyDataset]
    for kind in kinds:
        for severity in severities:
            spec = CorruptionSpec(kind, float(severity), seed)
            cell = corrupt_dataset(base, spec)
            cell.base_fingerprint = fingerprint
            cells[(kind, float(severity))] = cell
    log.debug(f'Built severity ladder with {len(cells)} cells')
    return cells
