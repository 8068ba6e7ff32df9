"""Synthetic labeled images with ground-truth object boxes.

Each 16x16 grayscale canvas carries background noise and exactly one
class-defining patch (bar, corner, blob or cross) at a random position;
the patch's bounding rectangle is the image's box. Classes are assigned
round-robin so every class count is within one of n/K.
"""

from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import cdbuffer.io
from cdbuffer import errors
from cdbuffer.util import Box, Path, log, rng as make_rng, sha256_arrays

STREAM_GENERATE = 11

#: Generator parameters used unless overridden.
DEFAULT_PARAMS = {
    'size': 16,
    'patch': 6,
    'background': 0.2,
    'noise': 0.05,
    'intensity': [0.6, 0.9],
}


class LabeledImage(NamedTuple):
    """One image: pixels [1, H, W] in [0, 1], a class label and its boxes."""

    pixels: np.ndarray
    label: int
    boxes: Tuple[Box, ...]


# --- Class patterns ----------------------------------------------------------
def _bar(p: int) -> np.ndarray:
    m = np.zeros((p, p), dtype=bool)
    m[p // 2 - 1:p // 2 + 1, :] = True
    return m


def _corner(p: int) -> np.ndarray:
    m = np.zeros((p, p), dtype=bool)
    m[:2, :] = True
    m[:, :2] = True
    return m


def _blob(p: int) -> np.ndarray:
    yy, xx = np.mgrid[:p, :p]
    c = (p - 1) / 2
    return (yy - c) ** 2 + (xx - c) ** 2 <= (p / 2) ** 2 - 1


def _cross(p: int) -> np.ndarray:
    return _bar(p) | _bar(p).T


PATTERNS = [_bar, _corner, _blob, _cross]  # type: List[Callable[[int], np.ndarray]]


def _bounding_box(mask: np.ndarray, x0: int, y0: int) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (x0 + int(cols[0]), y0 + int(rows[0]),
            x0 + int(cols[-1]) + 1, y0 + int(rows[-1]) + 1)


class ToyDataset:
    """Ordered collection of :class:`LabeledImage`."""

    def __init__(
        self,
        images: Sequence[LabeledImage],
        n_classes: int = 4,
        seed: Optional[int] = None,
        params: Optional[Dict] = None
    ) -> None:
        self.images = list(images)
        self.n_classes = n_classes
        self.seed = seed
        self.params = dict(DEFAULT_PARAMS if params is None else params)
        #: Fingerprint of the clean set this one was corrupted from.
        self.base_fingerprint = None  # type: Optional[str]

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledImage:
        return self.images[i]

    def __iter__(self) -> Iterator[LabeledImage]:
        return iter(self.images)

    def __repr__(self) -> str:
        return f'ToyDataset(n={len(self)}, n_classes={self.n_classes}, seed={self.seed})'

    # --- Array views ------------------------------------------------------
    def pixels(self, idx: Optional[Sequence[int]] = None) -> np.ndarray:
        """Stacked pixels [N, 1, H, W]."""
        items = self.images if idx is None else [self.images[i] for i in idx]
        if not items:
            raise errors.EmptyDatasetError()
        return np.stack([img.pixels for img in items])

    def labels(self, idx: Optional[Sequence[int]] = None) -> np.ndarray:
        items = self.images if idx is None else [self.images[i] for i in idx]
        return np.array([img.label for img in items], dtype=np.int64)

    def boxes(self, idx: Optional[Sequence[int]] = None) -> List[Tuple[Box, ...]]:
        items = self.images if idx is None else [self.images[i] for i in idx]
        return [img.boxes for img in items]

    def class_counts(self) -> Dict[int, int]:
        counts = {k: 0 for k in range(self.n_classes)}
        for img in self.images:
            counts[img.label] += 1
        return counts

    def batches(
        self,
        batch_size: int,
        rng: Optional[np.random.Generator] = None
    ) -> Iterator[np.ndarray]:
        """Yield index arrays covering the dataset once.

        Order is shuffled when ``rng`` is given, sequential otherwise.
        """
        if batch_size < 1:
            raise ValueError('batch_size must be >= 1')
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield order[start:start + batch_size]

    def fingerprint(self) -> str:
        """Content hash over pixels, labels and boxes."""
        if not self.images:
            return sha256_arrays([], extra='empty')
        boxes = np.array([b for img in self.images for b in img.boxes],
                         dtype=np.int64)
        return sha256_arrays([self.pixels(), self.labels(), boxes])

    def replace_pixels(self, pixels: Sequence[np.ndarray]) -> "ToyDataset":
        """Copy with new pixels; labels and boxes carried over."""
        images = [
            LabeledImage(np.asarray(p, dtype=np.float64), img.label, img.boxes)
            for p, img in zip(pixels, self.images)
        ]
        return ToyDataset(images, self.n_classes, self.seed, self.params)

    # --- Persistence ------------------------------------------------------
    def save(self, path: Path) -> None:
        counts = [len(img.boxes) for img in self.images]
        boxes = np.array([b for img in self.images for b in img.boxes],
                         dtype=np.int64).reshape(-1, 4)
        cdbuffer.io.write_arrays(
            path,
            cdbuffer.io.DATASET_FORMAT,
            {'pixels': self.pixels(), 'labels': self.labels(),
             'box_counts': np.array(counts, dtype=np.int64), 'boxes': boxes},
            meta={'n_classes': self.n_classes, 'seed': self.seed,
                  'params': self.params, 'count': len(self)}
        )

    @classmethod
    def load(cls, path: Path) -> "ToyDataset":
        arrays, meta = cdbuffer.io.read_arrays(path, cdbuffer.io.DATASET_FORMAT)
        images = []
        offset = 0
        for pixels, label, count in zip(arrays['pixels'], arrays['labels'],
                                        arrays['box_counts']):
            boxes = tuple(tuple(int(v) for v in b)
                          for b in arrays['boxes'][offset:offset + count])
            offset += count
            images.append(LabeledImage(pixels, int(label), boxes))
        return cls(images, meta['n_classes'], meta['seed'], meta['params'])


def gen_dataset(
    n: int,
    seed: int,
    n_classes: int = 4,
    params: Optional[Dict] = None
) -> ToyDataset:
    """Generate ``n`` labeled images deterministically from ``seed``."""
    if n < 1:
        raise errors.DatasetError(f'gen_dataset needs n >= 1, got {n}')
    if not 1 <= n_classes <= len(PATTERNS):
        raise errors.ConfigError(
            f'n_classes must be in [1, {len(PATTERNS)}], got {n_classes}')
    p = dict(DEFAULT_PARAMS if params is None else params)
    size, patch = p['size'], p['patch']
    if patch > size:
        raise errors.ConfigError(f'Patch size {patch} exceeds image size {size}')
    masks = [fn(patch) for fn in PATTERNS[:n_classes]]
    gen = make_rng(seed, STREAM_GENERATE)
    lo, hi = p['intensity']
    images = []
    for i in range(n):
        label = i % n_classes
        canvas = p['background'] + gen.normal(0.0, p['noise'], (size, size))
        x0, y0 = (int(v) for v in gen.integers(0, size - patch + 1, size=2))
        level = gen.uniform(lo, hi)
        region = canvas[y0:y0 + patch, x0:x0 + patch]
        region[masks[label]] = level + gen.normal(
            0.0, p['noise'], int(masks[label].sum()))
        pixels = np.clip(canvas, 0.0, 1.0)[None]
        images.append(
            LabeledImage(pixels, label, (_bounding_box(masks[label], x0, y0),))
        )
    log.debug(f'Generated {n} images (seed={seed})')
    return ToyDataset(images, n_classes, seed, p)
