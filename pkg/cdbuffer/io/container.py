"""Self-describing array documents built on the record framing.

Record 0 is a UTF-8 JSON manifest (sorted keys, compact separators)::

    {"format": "cdstats-1",
     "arrays": [{"name": ..., "shape": [...], "dtype": "<f8"}, ...],
     "meta": {...}}

Records 1..n hold the arrays in manifest order as raw row-major bytes
of the declared dtype (``<f8`` little-endian float64 or ``<i8``
little-endian int64).
"""

import json
from collections import OrderedDict
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from cdbuffer import errors
from cdbuffer.io.records import RecordReader, RecordWriter
from cdbuffer.util import Path, log

DTYPES = ('<f8', '<i8')


def _encode_manifest(manifest: Dict[str, Any]) -> bytes:
    return json.dumps(
        manifest, sort_keys=True, separators=(',', ':')
    ).encode('utf-8')


def write_arrays(
    path: Path,
    fmt: str,
    arrays: Mapping[str, np.ndarray],
    meta: Optional[Dict[str, Any]] = None
) -> None:
    """Write named arrays and metadata as one document of format ``fmt``."""
    directory = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
            arr = arr.astype('<i8')
        else:
            arr = arr.astype('<f8')
        directory.append({
            'name': name,
            'shape': list(arr.shape),
            'dtype': arr.dtype.str
        })
        payloads.append(np.ascontiguousarray(arr).tobytes())
    manifest = {'format': fmt, 'arrays': directory, 'meta': meta or {}}
    with RecordWriter(path) as writer:
        writer.write(_encode_manifest(manifest))
        for payload in payloads:
            writer.write(payload)
    log.debug(f'Wrote {fmt} document with {len(payloads)} arrays to {path}')


def read_arrays(
    path: Path,
    fmt: Union[str, Sequence[str]]
) -> Tuple["OrderedDict[str, np.ndarray]", Dict[str, Any]]:
    """Read a document, verifying its format version and array shapes."""
    records = RecordReader(path).read_all()
    if not records:
        raise errors.RecordError(f'{path} is empty')
    try:
        manifest = json.loads(records[0].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise errors.RecordError(f'Unreadable manifest in {path}: {e}')
    allowed = [fmt] if isinstance(fmt, str) else list(fmt)
    if manifest.get('format') not in allowed:
        raise errors.RecordError(
            f"{path} has format {manifest.get('format')!r}, expected "
            f"{' or '.join(allowed)}"
        )
    directory = manifest.get('arrays', [])
    if len(directory) != len(records) - 1:
        raise errors.RecordError(
            f'{path}: manifest lists {len(directory)} arrays but file holds '
            f'{len(records) - 1}'
        )
    arrays = OrderedDict()  # type: OrderedDict[str, np.ndarray]
    for entry, payload in zip(directory, records[1:]):
        if entry['dtype'] not in DTYPES:
            raise errors.RecordError(f"Unsupported dtype {entry['dtype']}")
        dtype = np.dtype(entry['dtype'])
        shape = tuple(entry['shape'])
        expected = int(np.prod(shape)) * dtype.itemsize
        if len(payload) != expected:
            raise errors.RecordError(
                f"Array {entry['name']} declares shape {shape} "
                f"({expected} bytes) but holds {len(payload)} bytes"
            )
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
        arrays[entry['name']] = arr.astype(np.float64 if dtype.kind == 'f'
                                           else np.int64)
    return arrays, manifest.get('meta', {})
