"""Single-sample bilinear RoI cropping."""

from typing import List, Sequence, Tuple

import numpy as np

from cdbuffer import errors
from cdbuffer.tensor import Tensor
from cdbuffer.util import Box, events, log


def scale_boxes(
    boxes: Sequence[Sequence[Box]],
    factor: float
) -> List[List[Tuple[float, float, float, float]]]:
    """Map pixel-space boxes onto a feature map ``factor`` times the size."""
    return [[tuple(float(v) * factor for v in box) for box in per_image]
            for per_image in boxes]


def _sample_grid(lo: float, hi: float, n: int, limit: int):
    # Cell centres in continuous coordinates, shifted so index i sits at i.
    pos = lo + (np.arange(n) + 0.5) * (hi - lo) / n - 0.5
    pos = np.clip(pos, 0.0, limit - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, limit - 1)
    return i0, i1, pos - i0


def roi_crop(
    feature: Tensor,
    boxes: Sequence[Sequence[Box]],
    out_h: int,
    out_w: int
) -> Tuple[Tensor, int]:
    """Crop-and-resize every box to ``out_h`` x ``out_w``.

    One bilinear sample is taken at the centre of each output cell.
    Boxes are (x0, y0, x1, y1) in feature coordinates with exclusive
    upper corners; zero-area boxes are skipped and counted.

    Returns:
        Tuple of the crops [M, C, out_h, out_w] and the number of skipped
        boxes.
    """
    if feature.ndim != 4:
        raise errors.DimensionError(f'roi_crop expects [N,C,H,W], got {feature.shape}')
    n, c, h, w = feature.shape
    if len(boxes) != n:
        raise errors.DimensionError(
            f'roi_crop: {len(boxes)} box lists for a batch of {n} (axis 0)')
    crops = []
    skipped = 0
    for plane, per_image in zip(feature.data, boxes):
        for (x0, y0, x1, y1) in per_image:
            if not (x1 > x0 and y1 > y0):
                skipped += 1
                continue
            ya, yb, wy = _sample_grid(y0, y1, out_h, h)
            xa, xb, wx = _sample_grid(x0, x1, out_w, w)
            wy = wy[:, None]
            top = (1 - wx) * plane[:, ya][:, :, xa] + wx * plane[:, ya][:, :, xb]
            bottom = (1 - wx) * plane[:, yb][:, :, xa] + wx * plane[:, yb][:, :, xb]
            crops.append((1 - wy) * top + wy * bottom)
    if skipped:
        events.hit('degenerate_box', skipped)
        log.debug(f'roi_crop skipped {skipped} zero-area boxes')
    if not crops:
        return Tensor(np.zeros((0, c, out_h, out_w))), skipped
    return Tensor(np.stack(crops)), skipped
