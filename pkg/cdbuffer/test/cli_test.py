import json
import logging
import shutil
import tempfile
import unittest
from os.path import exists, join

import numpy as np
import pandas as pd
from click.testing import CliRunner

from cdbuffer import io
from cdbuffer.cli import EXIT_CONFIG, EXIT_IO, build_config, main
from cdbuffer.experiment import MODEL_FILE, STATS_FILE

SMALL = ['--n-train', '40', '--n-eval', '20', '--n-target', '32', '--epochs', '0']


class TestCli(unittest.TestCase):

    @classmethod
    def setUpClass(cls) -> None:
        cls._orig_logging_level = logging.getLogger('cdbuffer').getEffectiveLevel()  # type: ignore
        logging.getLogger('cdbuffer').setLevel(40)
        cls.tmpdir = tempfile.mkdtemp(prefix='cdbuffer_test_')  # type: ignore
        cls.config_path = join(cls.tmpdir, 'small.json')  # type: ignore
        with open(cls.config_path, 'w') as f:  # type: ignore
            json.dump({'widths': [4], 'stage_enable': [True], 'instance_size': 2,
                       'batch_size': 8, 'sweep_kinds': ['haze_mix'],
                       'sweep_severities': [0.5]}, f)
        cls.source_dir = join(cls.tmpdir, 'source')  # type: ignore
        result = CliRunner().invoke(main, ['train-source', '--out', cls.source_dir,  # type: ignore
                                           '--config', cls.config_path, '--seed', '0']  # type: ignore
                                    + SMALL)
        assert result.exit_code == 0, result.output

    @classmethod
    def tearDownClass(cls) -> None:
        super().tearDownClass()
        logging.getLogger('cdbuffer').setLevel(cls._orig_logging_level)  # type: ignore
        shutil.rmtree(cls.tmpdir)  # type: ignore

    def _invoke(self, *args):
        return CliRunner().invoke(main, list(args))

    def _common(self, out):
        return ['--out', join(self.tmpdir, out), '--config', self.config_path,
                '--seed', '0'] + SMALL

    def test_train_source_outputs(self):
        for name in (MODEL_FILE, STATS_FILE, 'config.json', 'log.txt', 'timing.json'):
            self.assertTrue(exists(join(self.source_dir, name)), msg=name)

    def test_precompute_stats(self):
        out = join(self.tmpdir, 'recompute')
        result = self._invoke('precompute-stats', *self._common('recompute'),
                              '--model', join(self.source_dir, MODEL_FILE))
        self.assertEqual(result.exit_code, 0, msg=result.output)
        with open(join(out, STATS_FILE), 'rb') as a, open(join(self.source_dir, STATS_FILE), 'rb') as b:
            self.assertEqual(a.read(), b.read())

    def test_adapt(self):
        result = self._invoke(
            'adapt', *self._common('adapt'), '--steps', '2', '--eval-every', '1',
            '--model', join(self.source_dir, MODEL_FILE),
            '--stats', join(self.source_dir, STATS_FILE))
        self.assertEqual(result.exit_code, 0, msg=result.output)
        with open(join(self.tmpdir, 'adapt', 'report.json')) as f:
            report = json.load(f)
        self.assertEqual(len(report['steps']), 2)
        self.assertEqual(len(report['evaluations']), 2)
        self.assertTrue(0.0 <= report['summary']['final_accuracy'] <= 1.0)
        steps = pd.read_csv(join(self.tmpdir, 'adapt', 'steps.csv'))
        self.assertEqual(list(steps['step']), [1, 2])

    def test_adapt_continual(self):
        result = self._invoke(
            'adapt', *self._common('continual'), '--steps', '1', '--continual', '0.9,0.2',
            '--model', join(self.source_dir, MODEL_FILE),
            '--stats', join(self.source_dir, STATS_FILE))
        self.assertEqual(result.exit_code, 0, msg=result.output)
        with open(join(self.tmpdir, 'continual', 'report.json')) as f:
            report = json.load(f)
        self.assertEqual([s['segment'] for s in report['steps']], [0, 1])
        self.assertEqual([s['severity'] for s in report['summary']['segments']], [0.9, 0.2])

    def test_ablate(self):
        result = self._invoke('ablate', *self._common('ablate'), '--steps', '1')
        self.assertEqual(result.exit_code, 0, msg=result.output)
        df = pd.read_csv(join(self.tmpdir, 'ablate', 'ablation.csv'))
        self.assertEqual(len(df), 10)
        self.assertEqual(df['row'].iloc[0], 'bn_only')

    def test_sweep(self):
        result = self._invoke('sweep', *self._common('sweep'), '--steps', '1')
        self.assertEqual(result.exit_code, 0, msg=result.output)
        df = pd.read_csv(join(self.tmpdir, 'sweep', 'sweep.csv'))
        self.assertEqual(len(df), 5)
        direct = df[df['method'] == 'direct'].iloc[0]
        self.assertEqual(direct['final_accuracy'], direct['direct_accuracy'])

    def test_sweep_without_shift(self):
        config = join(self.tmpdir, 'identity.json')
        with open(config, 'w') as f:
            json.dump({'widths': [4], 'stage_enable': [True], 'instance_size': 2,
                       'batch_size': 8, 'sweep_kinds': ['haze_mix', 'gaussian_noise'],
                       'sweep_severities': [0.0]}, f)
        result = self._invoke('sweep', '--out', join(self.tmpdir, 'sweep0'), '--config', config,
                              '--seed', '0', '--steps', '1', *SMALL)
        self.assertEqual(result.exit_code, 0, msg=result.output)
        df = pd.read_csv(join(self.tmpdir, 'sweep0', 'sweep.csv'))
        self.assertEqual(len(df), 10)
        self.assertTrue((df['severity'] == 0.0).all())
        # The identity corruption leaves one clean evaluation set per seed.
        self.assertEqual(df['direct_accuracy'].nunique(), 1)
        self.assertEqual(df['source_discrepancy'].nunique(), 1)

    def test_no_enabled_stage(self):
        config = join(self.tmpdir, 'disabled.json')
        with open(config, 'w') as f:
            json.dump({'widths': [4, 4], 'stage_enable': [False, False]}, f)
        result = self._invoke('train-source', '--out', join(self.tmpdir, 'disabled'),
                              '--config', config, '--seed', '0', *SMALL)
        self.assertEqual(result.exit_code, EXIT_CONFIG)

    def test_invalid_stats_values(self):
        arrays, meta = io.read_arrays(join(self.source_dir, STATS_FILE), io.STATS_FORMAT)
        name = next(k for k in arrays if k.endswith('/dist_std'))
        arrays[name] = -np.abs(arrays[name]) - 1.0
        bad = join(self.tmpdir, 'negative.cdstats')
        io.write_arrays(bad, io.STATS_FORMAT, arrays, meta)
        result = self._invoke('adapt', *self._common('negative'),
                              '--model', join(self.source_dir, MODEL_FILE), '--stats', bad)
        self.assertEqual(result.exit_code, EXIT_IO)
        self.assertIsInstance(result.exception, SystemExit)

    def test_config_errors(self):
        result = self._invoke('train-source', *self._common('bad'), '--rho', '1.5')
        self.assertEqual(result.exit_code, EXIT_CONFIG)
        result = self._invoke('adapt', *self._common('bad'), '--rho', '1.5',
                              '--model', 'x', '--stats', 'y')
        self.assertEqual(result.exit_code, EXIT_CONFIG)
        result = self._invoke('adapt', *self._common('bad'), '--kind', 'fog',
                              '--model', 'x', '--stats', 'y')
        self.assertEqual(result.exit_code, 2)

    def test_missing_files(self):
        result = self._invoke('adapt', *self._common('missing'),
                              '--model', join(self.tmpdir, 'nope.cdckpt'),
                              '--stats', join(self.source_dir, STATS_FILE))
        self.assertEqual(result.exit_code, EXIT_IO)

    def test_corrupt_stats(self):
        bad = join(self.tmpdir, 'bad.cdstats')
        with open(bad, 'wb') as f:
            f.write(b'not a record file')
        result = self._invoke('adapt', *self._common('corrupt'),
                              '--model', join(self.source_dir, MODEL_FILE), '--stats', bad)
        self.assertEqual(result.exit_code, EXIT_IO)

    def test_build_config(self):
        config = build_config({'config': self.config_path, 'seed': 3, 'rho': 0.1,
                               'light': True, 'additive': False, 'method': None})
        self.assertEqual(config.seed, 3)
        self.assertEqual(config.rho_target, 0.1)
        self.assertEqual(config.stage_enable, [True])
        self.assertFalse(config.additive_on)
        preset = build_config({'method': 'parallel', 'seed': 0})
        self.assertEqual(preset.method, 'parallel')
        self.assertFalse(preset.coupling_on)


if __name__ == '__main__':
    unittest.main()
