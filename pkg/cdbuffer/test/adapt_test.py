import logging
import shutil
import tempfile
import unittest
from collections import OrderedDict
from os.path import join
from unittest.mock import patch

import numpy as np

from cdbuffer import discrepancy, errors
from cdbuffer.adapt import (AdaptState, Batch, StepReport, adapt_continual,
                            adapt_step, adapt_stream, align_loss, batch_stream,
                            compute_losses, evaluate, scale_adapter_grads,
                            total_loss)
from cdbuffer.config import ExperimentConfig, method_config
from cdbuffer.dataset import ToyDataset
from cdbuffer.stats import LayerStats, SourceStats
from cdbuffer.tensor import Tensor, grad_check
from cdbuffer.test.utils import shifted, small_dataset, tiny_source


def _config(**kwargs) -> ExperimentConfig:
    defaults = dict(widths=[3], stage_enable=[True], batch_size=8,
                    rho_target=0.25, seed=0, instance_size=2)
    defaults.update(kwargs)
    return ExperimentConfig(**defaults)


def _snapshot_params(state):
    return [p.data.copy() for p in state.parameters()]


def _spread_scores(state, seed=1):
    rng = np.random.default_rng(seed)
    for s in state.buffer.mask_state.parameters():
        s.data = rng.uniform(0.5, 1.5, size=s.shape)


class TestAdapt(unittest.TestCase):

    @classmethod
    def setUpClass(cls) -> None:
        cls._orig_logging_level = logging.getLogger('cdbuffer').getEffectiveLevel()  # type: ignore
        logging.getLogger('cdbuffer').setLevel(40)
        cls.net, cls.stats, cls.source = tiny_source(seed=0)  # type: ignore
        cls.target = shifted(small_dataset(32, seed=5), 'haze_mix', 0.7)  # type: ignore
        cls.batch = Batch(cls.target.pixels(list(range(8))),  # type: ignore
                          cls.target.boxes(list(range(8))))
        cls.tmpdir = tempfile.mkdtemp(prefix='cdbuffer_test_')  # type: ignore

    @classmethod
    def tearDownClass(cls) -> None:
        super().tearDownClass()
        logging.getLogger('cdbuffer').setLevel(cls._orig_logging_level)  # type: ignore
        shutil.rmtree(cls.tmpdir)  # type: ignore

    def _state(self, **kwargs) -> AdaptState:
        return AdaptState.create(self.net, _config(**kwargs))

    def _stream(self, steps, seed=0, dataset=None):
        return batch_stream(dataset or self.target, 8, steps, seed)

    # --- Losses --------------------------------------------------------------
    def _one_layer_stats(self, x: np.ndarray) -> SourceStats:
        c = x.shape[1]
        ls = LayerStats(x.mean(axis=0), np.zeros((c, 2, 2)), x.mean(axis=(0, 2, 3)),
                        x.std(axis=(0, 2, 3)), np.ones(3), np.ones(3))
        return SourceStats(OrderedDict(layer=ls), {'image_size': 4, 'instance_size': 2})

    def test_align_loss_examples(self):
        x = np.random.default_rng(0).normal(size=(4, 3, 4, 4))
        stats = self._one_layer_stats(x)
        loss, per_layer = align_loss({'layer': Tensor(x)}, stats)
        self.assertLess(loss.item(), 1e-12)
        loss, per_layer = align_loss({'layer': Tensor(x + 1.0)}, stats)
        self.assertAlmostEqual(loss.item(), 1.0, places=12)
        self.assertAlmostEqual(per_layer['layer'], 1.0, places=12)
        with self.assertRaises(errors.ConfigError):
            align_loss({'other': Tensor(x)}, stats)

    def test_total_loss(self):
        self.assertAlmostEqual(total_loss(1.0, 2.0, 0.05), 1.1, places=15)
        self.assertEqual(total_loss(1.0, 2.0, 0.0), 1.0)
        t = total_loss(Tensor(1.0), Tensor(2.0), 0.05)
        self.assertAlmostEqual(t.item(), 1.1, places=15)
        self.assertEqual(ExperimentConfig().lambda_reg, 0.05)

    def test_gradients_match_finite_differences(self):
        state = self._state(alpha_init=0.5)
        rng = np.random.default_rng(1)
        for bn in state.net.bn_layers():
            bn.gamma.data = rng.uniform(0.6, 1.4, size=bn.channels)
            bn.beta.data = rng.uniform(-0.2, 0.2, size=bn.channels)
        _spread_scores(state, seed=2)
        snapshot = state.buffer.snapshot(straight_through=False)
        self.assertGreater(snapshot.suppressed(), 0)
        score = compute_losses(state, self.batch.images, self.batch.boxes,
                               self.stats, snapshot).score

        def f():
            return compute_losses(state, self.batch.images, self.batch.boxes,
                                  self.stats, snapshot, score).total

        groups = state.parameter_groups()
        self.assertEqual(set(groups), {'bn', 'adapter', 'scores'})
        report = {}
        err = grad_check(f, state.parameters(), h=1e-5, report=report)
        self.assertLess(err, 1e-4, msg=str({k: v for k, v in report.items() if v > 1e-4}))

    # --- Step ----------------------------------------------------------------
    def test_frozen_step(self):
        state = self._state(lambda_reg=0.0, lr=0.0, r=0.0)
        before = _snapshot_params(state)
        report = adapt_step(state, self.batch, self.stats)
        for a, p in zip(before, state.parameters()):
            self.assertTrue(np.array_equal(a, p.data))
        self.assertTrue(np.isfinite(report.loss_align))
        self.assertEqual(report.loss_total, report.loss_align)
        self.assertEqual(report.step, 1)
        self.assertEqual(report.reactivated, 0)

    def test_loss_composition(self):
        state = self._state(lr=1e-2)
        reports = adapt_stream(state, self._stream(4), self.stats)
        self.assertEqual(len(reports), 4)
        for r in reports:
            self.assertLess(abs(r.loss_total - (r.loss_align + r.lambda_reg * r.loss_mask)),
                            1e-12)
            self.assertEqual(r.lambda_reg, 0.05)
            self.assertEqual(set(r.layer_discrepancy), set(self.stats.layer_names))
        no_mask = self._state(mask_loss_on=False)
        r = adapt_step(no_mask, self.batch, self.stats)
        self.assertEqual(r.lambda_reg, 0.0)
        self.assertEqual(r.loss_total, r.loss_align)

    def test_parameter_isolation(self):
        original = self.net.hash()
        state = self._state(lr=1e-2, r=0.5)
        frozen = [c.weight.data.copy() for c in state.net.convs()]
        head = [state.net.head.weight.data.copy(), state.net.head.bias.data.copy()]
        running = [b.copy() for b in state.net.state_dict().values()][-2:]
        adapt_stream(state, self._stream(3), self.stats)
        for a, conv in zip(frozen, state.net.convs()):
            self.assertTrue(np.array_equal(a, conv.weight.data))
        self.assertTrue(np.array_equal(head[0], state.net.head.weight.data))
        self.assertTrue(np.array_equal(head[1], state.net.head.bias.data))
        for a, b in zip(running, list(state.net.state_dict().values())[-2:]):
            self.assertTrue(np.array_equal(a, b))
        self.assertEqual(self.net.hash(), original)
        moved = [not np.array_equal(a.data, b.data) for a, b in
                 zip(self.net.parameter_groups()['bn'], state.net.parameter_groups()['bn'])]
        self.assertTrue(any(moved))

    def test_determinism(self):
        def run():
            state = self._state(lr=1e-2, r=0.5, seed=3)
            return adapt_stream(state, self._stream(4, seed=3), self.stats), state.hash()

        (a, ha), (b, hb) = run(), run()
        self.assertEqual(ha, hb)
        self.assertEqual([r.to_dict() for r in a], [r.to_dict() for r in b])

    def test_reactivation_after_update(self):
        low = self._state(lr=1e-2, r=0.0, rho_target=0.3)
        high = self._state(lr=1e-2, r=1.0, rho_target=0.3)
        _spread_scores(low)
        _spread_scores(high)
        ra = adapt_step(low, self.batch, self.stats)
        rb = adapt_step(high, self.batch, self.stats)
        self.assertEqual(ra.loss_total, rb.loss_total)
        self.assertEqual(ra.suppressed, rb.suppressed)
        self.assertGreater(rb.suppressed, 0)
        self.assertEqual(rb.reactivated, rb.suppressed)
        for pa, pb in zip(low.parameter_groups()['bn'], high.parameter_groups()['bn']):
            self.assertTrue(np.array_equal(pa.data, pb.data))

    def test_mask_pressure_ordering(self):
        base = method_config(_config(rho_target=0.1, r=0.0), 'subtractive_only')
        first_state = AdaptState.create(self.net, base)
        layer = first_state.buffer.mask_state.layers[-1]
        channel = 1
        real_score = discrepancy.score
        first = compute_losses(first_state, self.batch.images, self.batch.boxes, self.stats,
                               first_state.buffer.snapshot(straight_through=False)).score

        def peak(score):
            return max(float(np.max(v.combined)) for v in score.values())

        def boosted(*args, **kwargs):
            score = real_score(*args, **kwargs)
            combined = score[layer].combined.copy()
            combined[channel] = 10 * peak(score) + 1e-3
            score[layer] = score[layer]._replace(combined=combined)
            return score

        def no_alignment(taps, stats):
            return Tensor(0.0), OrderedDict((name, 0.0) for name in taps)

        # Boosted channel moves about 0.05 per step; every other one at most a tenth of that.
        mask_state = first_state.buffer.mask_state
        width = mask_state.scores[layer].shape[0]
        lr = 0.05 * width * len(mask_state.layers) / (base.lambda_reg * (10 * peak(first) + 1e-3))
        state = AdaptState.create(self.net, base.replace(lr=lr))
        mask_state = state.buffer.mask_state
        for s in mask_state.parameters():
            s.data = np.ones(s.shape)

        counts, off = [], []
        with patch('cdbuffer.adapt.discrepancy.score', boosted), \
                patch('cdbuffer.adapt.align_loss', no_alignment):
            for batch in self._stream(30):
                report = adapt_step(state, batch, self.stats)
                self.assertEqual(report.reactivated, 0)
                counts.append(report.suppressed)
                off.append(state.buffer.snapshot(straight_through=False).hard[layer][channel] == 0)
        self.assertEqual(counts[0], 0)
        self.assertTrue(all(a <= b for a, b in zip(counts, counts[1:])), msg=counts)
        self.assertEqual(counts[-1], int(np.floor(0.1 * mask_state.total)))
        self.assertTrue(all(off))

    def test_nan_loss(self):
        state = self._state()
        state.net.bn_layer('stem.bn').beta.data[0] = np.nan
        with self.assertRaises(errors.AdaptationError) as ctx:
            adapt_step(state, self.batch, self.stats)
        self.assertEqual(ctx.exception.step, 0)
        self.assertTrue(any(k.startswith('align/') for k in ctx.exception.decomposition))

    def test_source_stream_stability(self):
        state = self._state(lr=1e-3)
        reports = adapt_stream(state, batch_stream(self.source, 8, 100, 0), self.stats)
        early = np.mean([r.loss_align for r in reports[:10]])
        late = np.mean([r.loss_align for r in reports[-10:]])
        self.assertLessEqual(late, 2 * early)

    # --- Gradient scaling ----------------------------------------------------
    def _with_grads(self, state):
        for p in state.buffer.additive.parameters():
            p.grad = np.ones(p.shape)

    def test_scale_adapter_grads(self):
        state = self._state()
        buffer = state.buffer
        blocks = list(buffer.block_layers.items())
        self._with_grads(state)
        gains = scale_adapter_grads(buffer, {l: 0.7 for _, ls in blocks for l in ls})
        self.assertEqual(set(gains.values()), {1.0})
        self.assertTrue(all(np.all(p.grad == 1.0) for p in buffer.additive.parameters()))

        d = {}
        for l in blocks[0][1]:
            d[l] = 0.0
        for l in blocks[1][1]:
            d[l] = 1.0
        gains = scale_adapter_grads(buffer, d)
        self.assertEqual(gains[blocks[0][0]], 0.5)
        self.assertEqual(gains[blocks[1][0]], 2.0)
        for p in buffer.additive[blocks[1][0]].parameters().values():
            self.assertTrue(np.all(p.grad == 2.0))
        for s in buffer.mask_state.parameters():
            self.assertIsNone(s.grad)

        self._with_grads(state)
        gains = scale_adapter_grads(buffer, {l: 0.0 for l in d})
        self.assertEqual(set(gains.values()), {1.0})

    # --- Stream and evaluation -----------------------------------------------
    def test_empty_stream(self):
        self.assertEqual(adapt_stream(self._state(), iter([]), self.stats), [])

    def test_eval_schedule(self):
        state = self._state()
        eval_set = self.target
        reports = adapt_stream(state, self._stream(5), self.stats, eval_set, eval_every=2)
        self.assertEqual([r.accuracy is not None for r in reports],
                         [False, True, False, True, True])
        self.assertEqual(reports[-1].csv_row()['accuracy'], reports[-1].accuracy)
        self.assertEqual(reports[0].csv_row()['accuracy'], '')

    def test_continual_segments(self):
        state = self._state()
        base = small_dataset(16, seed=9)
        segments = [(sev, batch_stream(shifted(base, 'haze_mix', sev), 8, 2, 0, key=i), None)
                    for i, sev in enumerate((0.9, 0.2, 0.9))]
        reports = adapt_continual(state, segments, self.stats)
        self.assertEqual([r.segment for r in reports], [0, 0, 1, 1, 2, 2])
        self.assertEqual([r.severity for r in reports], [0.9, 0.9, 0.2, 0.2, 0.9, 0.9])
        self.assertEqual([r.step for r in reports], [1, 2, 3, 4, 5, 6])
        self.assertEqual(state.step_count, 6)

    def test_evaluate_purity(self):
        state = self._state(lr=1e-2)
        adapt_step(state, self.batch, self.stats)
        before = state.hash()
        a = evaluate(state, self.target)
        b = evaluate(state, self.target)
        self.assertEqual(a, b)
        self.assertEqual(state.hash(), before)
        self.assertTrue(0.0 <= a <= 1.0)

    def test_evaluate_ties(self):
        state = self._state()
        state.net.head.weight.data = np.zeros_like(state.net.head.weight.data)
        state.net.head.bias.data = np.zeros_like(state.net.head.bias.data)
        self.assertEqual(evaluate(state, self.target),
                         float(np.mean(self.target.labels() == 0)))
        with self.assertRaises(errors.EmptyDatasetError):
            evaluate(state, ToyDataset([]))

    def test_batch_stream(self):
        batches = list(batch_stream(self.target, 8, 7, seed=1))
        self.assertEqual(len(batches), 7)
        self.assertTrue(all(b.images.shape == (8, 1, 8, 8) for b in batches))
        again = list(batch_stream(self.target, 8, 7, seed=1))
        for a, b in zip(batches, again):
            self.assertTrue(np.array_equal(a.images, b.images))
        small = list(batch_stream(small_dataset(3), 8, 2, seed=0))
        self.assertEqual(small[0].images.shape[0], 3)
        with self.assertRaises(errors.EmptyDatasetError):
            next(batch_stream(ToyDataset([]), 8, 1, seed=0))

    # --- Checkpoint ----------------------------------------------------------
    def test_checkpoint_roundtrip(self):
        state = self._state(lr=1e-2, r=0.5)
        adapt_stream(state, self._stream(2), self.stats)
        path = join(self.tmpdir, 'adapt.cdckpt')
        state.save(path)
        loaded = AdaptState.load(path)
        self.assertEqual(loaded.hash(), state.hash())
        self.assertEqual(loaded.step_count, 2)
        self.assertEqual(loaded.config, state.config)
        ra = adapt_step(state, self.batch, self.stats)
        rb = adapt_step(loaded, self.batch, self.stats)
        self.assertEqual(ra.to_dict(), rb.to_dict())
        self.net.save(join(self.tmpdir, 'plain.cdckpt'))
        with self.assertRaises(errors.RecordError):
            AdaptState.load(join(self.tmpdir, 'plain.cdckpt'))

    def test_step_report_dict(self):
        r = StepReport(1, 0.5, 0.1, 0.505, 0.05, 2, 0, 0.3, {'a': 1.0})
        self.assertEqual(r.to_dict()['layer_discrepancy'], {'a': 1.0})
        self.assertEqual(r.csv_row()['accuracy'], '')


if __name__ == '__main__':
    unittest.main()
