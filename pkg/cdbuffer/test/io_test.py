import logging
import shutil
import tempfile
import unittest
from collections import OrderedDict
from os.path import join

import numpy as np

from cdbuffer import errors, io
from cdbuffer.io.records import RecordReader, RecordWriter, masked_crc


class TestRecords(unittest.TestCase):

    @classmethod
    def setUpClass(cls) -> None:
        cls._orig_logging_level = logging.getLogger('cdbuffer').getEffectiveLevel()  # type: ignore
        logging.getLogger('cdbuffer').setLevel(40)
        cls.tmpdir = tempfile.mkdtemp(prefix='cdbuffer_test_')  # type: ignore

    @classmethod
    def tearDownClass(cls) -> None:
        super().tearDownClass()
        logging.getLogger('cdbuffer').setLevel(cls._orig_logging_level)  # type: ignore
        shutil.rmtree(cls.tmpdir)  # type: ignore

    def _doc(self, name: str) -> str:
        path = join(self.tmpdir, name)
        arrays = OrderedDict([('a', np.arange(6.0).reshape(2, 3)),
                              ('b', np.array([1, 2, 3]))])
        io.write_arrays(path, io.STATS_FORMAT, arrays, {'note': 'x'})
        return path

    def test_records(self):
        path = join(self.tmpdir, 'plain.rec')
        with RecordWriter(path) as w:
            w.write(b'first')
            w.write(b'')
            w.write(b'third')
        self.assertEqual(RecordReader(path).read_all(), [b'first', b'', b'third'])
        self.assertEqual(len(masked_crc(b'abc')), 4)

    def test_documents(self):
        arrays, meta = io.read_arrays(self._doc('doc.cdstats'), io.STATS_FORMAT)
        self.assertEqual(list(arrays), ['a', 'b'])
        self.assertEqual(arrays['a'].dtype, np.float64)
        self.assertEqual(arrays['b'].dtype, np.int64)
        self.assertTrue(np.array_equal(arrays['a'], np.arange(6.0).reshape(2, 3)))
        self.assertEqual(meta, {'note': 'x'})

    def test_wrong_format(self):
        path = self._doc('fmt.cdstats')
        with self.assertRaises(errors.RecordError):
            io.read_arrays(path, io.CHECKPOINT_FORMAT)
        arrays, _ = io.read_arrays(path, [io.CHECKPOINT_FORMAT, io.STATS_FORMAT])
        self.assertEqual(len(arrays), 2)

    def test_corrupted_payload(self):
        path = self._doc('bad.cdstats')
        with open(path, 'rb') as f:
            data = bytearray(f.read())
        data[-6] ^= 0xff
        with open(path, 'wb') as f:
            f.write(bytes(data))
        with self.assertRaises(errors.RecordError):
            io.read_arrays(path, io.STATS_FORMAT)

    def test_corrupted_length(self):
        path = self._doc('len.cdstats')
        with open(path, 'rb') as f:
            data = bytearray(f.read())
        data[0] ^= 0x01
        with open(path, 'wb') as f:
            f.write(bytes(data))
        with self.assertRaises(errors.RecordError):
            RecordReader(path).read_all()

    def test_truncated(self):
        path = self._doc('short.cdstats')
        with open(path, 'rb') as f:
            data = f.read()
        for cut in (3, len(data) - 2, len(data) - 10):
            with open(path, 'wb') as f:
                f.write(data[:cut])
            with self.assertRaises(errors.RecordError):
                io.read_arrays(path, io.STATS_FORMAT)

    def test_empty_file(self):
        path = join(self.tmpdir, 'empty.cdstats')
        open(path, 'wb').close()
        with self.assertRaises(errors.RecordError):
            io.read_arrays(path, io.STATS_FORMAT)


if __name__ == '__main__':
    unittest.main()
