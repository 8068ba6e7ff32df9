"""Length-prefixed, CRC-checked record files.

Each record is framed as::

    uint64 length (little-endian)
    uint32 masked crc32c of the 8 length bytes
    payload (length bytes)
    uint32 masked crc32c of the payload
"""

import io
import struct
from typing import Iterator, List

import crc32c

from cdbuffer import errors
from cdbuffer.util import Path

CRC_MASK = 0xa282ead8


def masked_crc(data: bytes) -> bytes:
    """CRC checksum."""
    crc = crc32c.crc32c(data)
    masked = (((crc >> 15) | (crc << 17)) + CRC_MASK) & 0xffffffff
    return struct.pack("<I", masked)


class RecordWriter:
    """Opens a record file for writing.

    Args:
        data_path (str): Path to the record file.
    """

    def __init__(self, data_path: Path) -> None:
        self.file = io.open(data_path, "wb")

    def __enter__(self) -> "RecordWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        """Close the record file."""
        self.file.close()

    def write(self, record: bytes) -> None:
        length_bytes = struct.pack("<Q", len(record))
        self.file.write(length_bytes)
        self.file.write(masked_crc(length_bytes))
        self.file.write(record)
        self.file.write(masked_crc(record))


class RecordReader:
    """Iterates over the payloads of a record file, verifying checksums."""

    def __init__(self, data_path: Path) -> None:
        self.data_path = data_path
        self.length_bytes = bytearray(8)
        self.crc_bytes = bytearray(4)

    def __iter__(self) -> Iterator[bytes]:
        with io.open(self.data_path, 'rb') as f:
            index = 0
            while True:
                n = f.readinto(self.length_bytes)
                if n == 0:
                    return
                if n != 8:
                    raise errors.RecordError(
                        f"Failed to read the size of record {index}.")
                if f.readinto(self.crc_bytes) != 4:
                    raise errors.RecordError(
                        f"Failed to read the start token of record {index}.")
                if bytes(self.crc_bytes) != masked_crc(bytes(self.length_bytes)):
                    raise errors.RecordError(
                        f"Length checksum mismatch in record {index}.")
                length, = struct.unpack("<Q", self.length_bytes)
                datum = bytearray(length)
                if f.readinto(datum) != length:
                    raise errors.RecordError(
                        f"Failed to read record {index}.")
                if f.readinto(self.crc_bytes) != 4:
                    raise errors.RecordError(
                        f"Failed to read the end token of record {index}.")
                if bytes(self.crc_bytes) != masked_crc(bytes(datum)):
                    raise errors.RecordError(
                        f"Payload checksum mismatch in record {index}.")
                yield bytes(datum)
                index += 1

    def read_all(self) -> List[bytes]:
        return list(self)
