import logging
import unittest
from collections import OrderedDict

import numpy as np

from cdbuffer import discrepancy, errors
from cdbuffer.discrepancy import (METRICS, combine, image_discrepancy,
                                  instance_discrepancy, layer_aggregate, normalize)
from cdbuffer.tensor import Tensor, no_grad
from cdbuffer.test.utils import shifted, tiny_source
from cdbuffer.util import events


def _loop_l1(x: np.ndarray, mean: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros(c)
    for ch in range(c):
        total = 0.0
        for i in range(n):
            for y in range(h):
                for z in range(w):
                    total += abs(x[i, ch, y, z] - mean[ch, y, z])
        out[ch] = total / (n * h * w)
    return out


class TestDiscrepancy(unittest.TestCase):

    @classmethod
    def setUpClass(cls) -> None:
        cls._orig_logging_level = logging.getLogger('cdbuffer').getEffectiveLevel()  # type: ignore
        logging.getLogger('cdbuffer').setLevel(40)
        cls.rng = np.random.default_rng(99)  # type: ignore
        cls.net, cls.stats, cls.source = tiny_source(seed=1)  # type: ignore
        cls.target = shifted(cls.source, 'haze_mix', 0.8, seed=1)  # type: ignore

    @classmethod
    def tearDownClass(cls) -> None:
        super().tearDownClass()
        logging.getLogger('cdbuffer').setLevel(cls._orig_logging_level)  # type: ignore

    def _taps(self, dataset, idx):
        with no_grad():
            _, taps = self.net.forward_with_taps(Tensor(dataset.pixels(idx)))
        return taps

    # --- Image and instance terms --------------------------------------------
    def test_image_zero_and_unit(self):
        mean = self.rng.normal(size=(3, 4, 4))
        same = np.broadcast_to(mean, (2, 3, 4, 4))
        self.assertTrue(np.array_equal(image_discrepancy(same, mean), np.zeros(3)))
        self.assertTrue(np.allclose(image_discrepancy(same + 1.0, mean), np.ones(3),
                                    rtol=0, atol=1e-12))

    def test_image_loop_oracle(self):
        x = self.rng.normal(size=(3, 2, 4, 5))
        mean = self.rng.normal(size=(2, 4, 5))
        self.assertLess(np.max(np.abs(image_discrepancy(Tensor(x), mean)
                                      - _loop_l1(x, mean))), 1e-12)

    def test_image_errors(self):
        with self.assertRaises(errors.DimensionError):
            image_discrepancy(np.zeros((0, 2, 3, 3)), np.zeros((2, 3, 3)))
        with self.assertRaises(errors.DimensionError):
            image_discrepancy(np.zeros((1, 2, 3, 3)), np.zeros((3, 3, 3)))
        with self.assertRaises(errors.ConfigError):
            image_discrepancy(np.zeros((1, 2, 3, 3)), np.zeros((2, 3, 3)), 'l7')

    def test_instance(self):
        mean = self.rng.normal(size=(2, 4, 4))
        vec, absent = instance_discrepancy(np.broadcast_to(mean, (3, 2, 4, 4)), mean)
        self.assertTrue(np.array_equal(vec, np.zeros(2)))
        self.assertFalse(absent)
        vec, absent = instance_discrepancy(np.zeros((0, 2, 4, 4)), mean)
        self.assertTrue(np.array_equal(vec, np.zeros(2)))
        self.assertTrue(absent)
        crops = self.rng.normal(size=(2, 2, 4, 4))
        vec, _ = instance_discrepancy(crops, mean)
        self.assertLess(np.max(np.abs(vec - _loop_l1(crops, mean))), 1e-12)

    def test_permutation_equivariance(self):
        x = self.rng.normal(size=(2, 4, 3, 3))
        mean = self.rng.normal(size=(4, 3, 3))
        perm = np.array([2, 0, 3, 1])
        for metric in METRICS:
            d = image_discrepancy(x, mean, metric)
            dp = image_discrepancy(x[:, perm], mean[perm], metric)
            self.assertTrue(np.allclose(dp, d[perm], rtol=0, atol=1e-14), msg=metric)

    def test_other_metrics(self):
        mean = self.rng.uniform(0.1, 1.0, size=(2, 3, 3))
        same = np.broadcast_to(mean, (2, 2, 3, 3))
        for metric in ('l2', 'cosine'):
            self.assertTrue(np.allclose(image_discrepancy(same, mean, metric), 0.0,
                                        atol=1e-12), msg=metric)
            d = image_discrepancy(self.rng.normal(size=(2, 2, 3, 3)), mean, metric)
            self.assertTrue(np.all(d >= 0), msg=metric)
        x = np.broadcast_to(2.0 * mean, (1, 2, 3, 3))
        self.assertTrue(np.allclose(image_discrepancy(x, mean, 'cosine'), 0.0, atol=1e-12))
        self.assertTrue(np.allclose(image_discrepancy(x, mean, 'l2'),
                                    np.sqrt(np.square(mean).mean(axis=(1, 2)))))

    # --- Combination ---------------------------------------------------------
    def test_combine(self):
        self.assertTrue(np.allclose(combine([1, 1, 1], [1, 1, 1]), [2, 2, 2]))
        self.assertTrue(np.allclose(combine([2, 0], [0, 2]), [2, 2]))
        self.assertTrue(np.array_equal(combine([0, 0], [0, 0]), [0, 0]))
        self.assertTrue(np.allclose(combine([1, 3], [0, 0], instance_absent=True), [1, 3]))

    def test_combine_with_scales(self):
        out = combine([2.0, 4.0], [1.0, 1.0], image_scale=2.0, instance_scale=0.5)
        self.assertTrue(np.allclose(out, [3.0, 4.0]))
        # unusable scales fall back to the batch mean
        out = combine([2.0, 4.0], [1.0, 3.0], image_scale=0.0, instance_scale=None)
        self.assertTrue(np.allclose(out, [2.0 / 3 + 0.5, 4.0 / 3 + 1.5]))
        with self.assertRaises(errors.DimensionError):
            combine([1.0], [1.0, 2.0])

    def test_normalize_and_aggregate(self):
        self.assertTrue(np.allclose(normalize(np.array([1.0, 3.0])), [0.5, 1.5]))
        self.assertEqual(layer_aggregate([2, 2, 2]), 2.0)
        self.assertEqual(layer_aggregate(np.zeros(5)), 0.0)
        v = self.rng.uniform(size=17)
        self.assertLess(abs(layer_aggregate(v) - np.mean(v)), 1e-15)
        with self.assertRaises(errors.DimensionError):
            layer_aggregate([])

    # --- Full score ----------------------------------------------------------
    def test_score_structure(self):
        idx = list(range(8))
        taps = self._taps(self.target, idx)
        boxes = self.target.boxes(idx)
        result = discrepancy.score(taps, boxes, self.stats)
        self.assertEqual(list(result.keys()), list(taps.keys()))
        for name, ld in result.items():
            ref = self.stats.layers[name]
            self.assertFalse(ld.instance_absent)
            self.assertTrue(np.all(ld.image >= 0) and np.all(ld.instance >= 0))
            expected = (normalize(ld.image, ref.image_scale('l1'))
                        + normalize(ld.instance, ref.instance_scale('l1')))
            self.assertTrue(np.allclose(ld.combined, expected, rtol=0, atol=1e-12))
            self.assertAlmostEqual(ld.layer, float(np.mean(ld.combined)), places=12)
        self.assertAlmostEqual(result.mean(), float(np.mean(list(result.layer_values().values()))))
        self.assertEqual(list(result.combined().keys()), list(taps.keys()))

    def test_score_batch_norm(self):
        idx = list(range(8))
        result = discrepancy.score(self._taps(self.target, idx), self.target.boxes(idx),
                                   self.stats, norm='batch')
        for ld in result.values():
            self.assertAlmostEqual(ld.layer, 2.0, places=9)

    def test_score_zero_at_source(self):
        taps = OrderedDict(
            (name, Tensor(np.broadcast_to(ls.image_mean, (2,) + ls.image_mean.shape)))
            for name, ls in self.stats.layers.items())
        before = events['instance_absent']
        result = discrepancy.score(taps, [(), ()], self.stats)
        for ld in result.values():
            self.assertTrue(ld.instance_absent)
            self.assertTrue(np.array_equal(ld.combined, np.zeros_like(ld.combined)))
        self.assertEqual(events['instance_absent'], before + len(taps))

    def test_score_instance_absent(self):
        taps = self._taps(self.target, [0, 1, 2, 3])
        result = discrepancy.score(taps, [()] * 4, self.stats)
        for name, ld in result.items():
            scale = self.stats.layers[name].image_scale('l1')
            self.assertTrue(np.allclose(ld.combined, 2.0 * ld.image / scale))

    def test_score_errors(self):
        taps = self._taps(self.target, [0, 1])
        boxes = self.target.boxes([0, 1])
        with self.assertRaises(errors.ConfigError):
            discrepancy.score(taps, boxes, self.stats, norm='minmax')
        partial = OrderedDict(list(taps.items())[:2])
        with self.assertRaises(errors.ConfigError):
            discrepancy.score(partial, boxes, self.stats)

    def test_shift_raises_discrepancy(self):
        idx = list(range(16))
        clean = discrepancy.score(self._taps(self.source, idx), self.source.boxes(idx),
                                  self.stats)
        shifted_ = discrepancy.score(self._taps(self.target, idx), self.target.boxes(idx),
                                     self.stats)
        self.assertGreater(shifted_.mean(), clean.mean())


if __name__ == '__main__':
    unittest.main()
