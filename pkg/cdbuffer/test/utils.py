"""Small fixtures and brute-force oracles shared by the unit tests."""

from collections import OrderedDict
from typing import Dict, Sequence, Tuple

import numpy as np

from cdbuffer.corruption import CorruptionSpec, corrupt_dataset
from cdbuffer.dataset import DEFAULT_PARAMS, ToyDataset, gen_dataset
from cdbuffer.model import ToyNet
from cdbuffer.stats import SourceStats, precompute_stats
from cdbuffer.tensor import Tensor, no_grad

#: 8x8 images with 4x4 patterns keep every forward pass cheap.
SMALL_PARAMS = dict(DEFAULT_PARAMS, size=8, patch=4)


def small_dataset(n: int, seed: int = 0) -> ToyDataset:
    return gen_dataset(n, seed, params=SMALL_PARAMS)


def tiny_net(
    widths: Sequence[int] = (3,),
    blocks_per_stage: int = 2,
    seed: int = 0
) -> ToyNet:
    return ToyNet(widths, blocks_per_stage, seed=seed)


def calibrate(net: ToyNet, dataset: ToyDataset) -> ToyNet:
    """Set every running statistic to the statistics of ``dataset``."""
    saved = [bn.momentum for bn in net.bn_layers()]
    for bn in net.bn_layers():
        bn.momentum = 1.0
    with no_grad():
        net.forward_with_taps(Tensor(dataset.pixels()), training=True)
    for bn, m in zip(net.bn_layers(), saved):
        bn.momentum = m
    return net


def tiny_source(
    seed: int = 0,
    n: int = 24,
    widths: Sequence[int] = (3,),
    instance_size: int = 2
) -> Tuple[ToyNet, SourceStats, ToyDataset]:
    """Calibrated (untrained) network, its statistics and the source set."""
    source = small_dataset(n, seed)
    net = calibrate(tiny_net(widths, seed=seed), source)
    stats = precompute_stats(net, source, batch_size=8,
                             instance_size=instance_size)
    return net, stats, source


def shifted(dataset: ToyDataset, kind: str = 'haze_mix',
            severity: float = 0.7, seed: int = 0) -> ToyDataset:
    return corrupt_dataset(dataset, CorruptionSpec(kind, severity, seed))


# --- Oracles -----------------------------------------------------------------
def naive_conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1,
                 padding: int = 0) -> np.ndarray:
    """Direct six-loop cross-correlation."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                out[b, f, i, j] += (
                                    xp[b, ch, i * stride + u, j * stride + v]
                                    * w[f, ch, u, v])
    return out


def bilinear(plane: np.ndarray, y: float, x: float) -> np.ndarray:
    """Bilinear sample of a [C, H, W] map at one (clamped) point."""
    _, h, w = plane.shape
    y = min(max(y, 0.0), h - 1)
    x = min(max(x, 0.0), w - 1)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    dy, dx = y - y0, x - x0
    return ((1 - dy) * (1 - dx) * plane[:, y0, x0] + (1 - dy) * dx * plane[:, y0, x1]
            + dy * (1 - dx) * plane[:, y1, x0] + dy * dx * plane[:, y1, x1])


def naive_crop(plane: np.ndarray, box: Sequence[float], out_h: int,
               out_w: int) -> np.ndarray:
    """Cell-centre sampling of one box, one point at a time."""
    x0, y0, x1, y1 = box
    crop = np.zeros((plane.shape[0], out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = y0 + (i + 0.5) * (y1 - y0) / out_h - 0.5
            x = x0 + (j + 0.5) * (x1 - x0) / out_w - 0.5
            crop[:, i, j] = bilinear(plane, y, x)
    return crop


def two_pass_stats(
    net: ToyNet,
    dataset: ToyDataset,
    instance_size: int
) -> Dict[str, Dict[str, np.ndarray]]:
    """Layer statistics from a single forward over the whole dataset."""
    with no_grad():
        _, taps = net.forward_with_taps(Tensor(dataset.pixels()))
    image_size = dataset.pixels([0]).shape[-1]
    out = OrderedDict()  # type: OrderedDict[str, Dict[str, np.ndarray]]
    for name, tap in taps.items():
        x = tap.data
        factor = x.shape[2] / image_size
        crops = [naive_crop(x[i], [v * factor for v in box], instance_size,
                            instance_size)
                 for i, img in enumerate(dataset) for box in img.boxes]
        out[name] = {
            'image_mean': x.mean(axis=0),
            'instance_mean': np.mean(crops, axis=0),
            'dist_mean': x.mean(axis=(0, 2, 3)),
            'dist_std': x.std(axis=(0, 2, 3)),
        }
    return out

