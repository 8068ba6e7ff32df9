from cdbuffer.io.container import read_arrays, write_arrays
from cdbuffer.io.records import RecordReader, RecordWriter, masked_crc

STATS_FORMAT = 'cdstats-1'
CHECKPOINT_FORMAT = 'cdckpt-1'
DATASET_FORMAT = 'cddata-1'
