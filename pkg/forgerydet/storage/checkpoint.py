"""Binary container for named arrays.

Layout::

  [8 bytes]  header length L, unsigned little-endian
  [L bytes]  UTF-8 JSON header
  [rest]     contiguous little-endian raw blob

The header is ``{"format", "version", "step", "metadata", "entries"}`` where each
entry is ``{"name", "dtype" ("f32" | "f64"), "shape", "offset", "byte_length"}``
with offsets relative to the start of the blob. Entries keep insertion order and
the header is serialized with sorted keys, so equal content gives equal bytes.
"""
from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import numpy as np

from forgerydet.core.errors import CheckpointFormatError
from forgerydet.core.params import ParameterStore

logger = logging.getLogger(__name__)

FORMAT_NAME = 'forgerydet-container'
FORMAT_VERSION = 1
_HEADER_LENGTH = struct.Struct('<Q')
_DTYPES = {'f32': np.dtype('<f4'), 'f64': np.dtype('<f8')}
_DTYPE_CODES = {4: 'f32', 8: 'f64'}

PathLike = Union[str, Path]


@dataclass
class Container:
  arrays: Dict[str, np.ndarray] = field(default_factory=dict)
  step: int = 0
  metadata: Dict[str, Any] = field(default_factory=dict)


def _dtype_code(dtype: np.dtype) -> Optional[str]:
  dtype = np.dtype(dtype)
  return _DTYPE_CODES.get(dtype.itemsize) if dtype.kind == 'f' else None


def encode_container(container: Container) -> bytes:
  entries: List[Dict[str, Any]] = []
  chunks: List[bytes] = []
  offset = 0
  for name, array in container.arrays.items():
    array = np.asarray(array)
    code = _dtype_code(array.dtype)
    if code is None:
      raise CheckpointFormatError(f'unsupported dtype {array.dtype} for entry {name!r}', field='dtype')
    raw = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
    entries.append({
      'name': name,
      'dtype': code,
      'shape': [int(dim) for dim in array.shape],
      'offset': offset,
      'byte_length': len(raw)
    })
    chunks.append(raw)
    offset += len(raw)
  header = {
    'format': FORMAT_NAME,
    'version': FORMAT_VERSION,
    'step': int(container.step),
    'metadata': container.metadata,
    'entries': entries
  }
  header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
  return _HEADER_LENGTH.pack(len(header_bytes)) + header_bytes + b''.join(chunks)


def decode_container(payload: bytes) -> Container:
  if len(payload) < _HEADER_LENGTH.size:
    raise CheckpointFormatError('file shorter than the length prefix', field='header_length')
  (header_length,) = _HEADER_LENGTH.unpack_from(payload, 0)
  start = _HEADER_LENGTH.size
  if start + header_length > len(payload):
    raise CheckpointFormatError(f'header length {header_length} exceeds file size', field='header_length')
  try:
    header = json.loads(payload[start:start + header_length].decode('utf-8'))
  except (UnicodeDecodeError, json.JSONDecodeError) as exc:
    raise CheckpointFormatError(f'corrupt header: {exc}', field='header') from None
  if not isinstance(header, dict) or header.get('format') != FORMAT_NAME:
    raise CheckpointFormatError('not a forgerydet container', field='format')
  if header.get('version') != FORMAT_VERSION:
    raise CheckpointFormatError(f'unsupported version {header.get("version")!r}', field='version')
  step = header.get('step', 0)
  if not isinstance(step, int) or step < 0:
    raise CheckpointFormatError(f'invalid step {step!r}', field='step')
  metadata = header.get('metadata', {})
  if not isinstance(metadata, dict):
    raise CheckpointFormatError('metadata must be an object', field='metadata')
  entries = header.get('entries')
  if not isinstance(entries, list):
    raise CheckpointFormatError('entries must be a list', field='entries')

  blob = memoryview(payload)[start + header_length:]
  arrays: Dict[str, np.ndarray] = {}
  for position, entry in enumerate(entries):
    name = _entry_name(entry, position)
    if name in arrays:
      raise CheckpointFormatError(f'duplicate entry {name!r}', field='name')
    dtype = _DTYPES.get(entry.get('dtype'))
    if dtype is None:
      raise CheckpointFormatError(f'unknown dtype {entry.get("dtype")!r} for {name!r}', field='dtype')
    shape = entry.get('shape')
    if not isinstance(shape, list) or not all(isinstance(dim, int) and dim >= 0 for dim in shape):
      raise CheckpointFormatError(f'invalid shape for {name!r}', field='shape')
    offset, byte_length = entry.get('offset'), entry.get('byte_length')
    if not isinstance(offset, int) or offset < 0:
      raise CheckpointFormatError(f'invalid offset for {name!r}', field='offset')
    if not isinstance(byte_length, int) or byte_length != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
      raise CheckpointFormatError(f'byte_length does not match shape {shape} for {name!r}', field='byte_length')
    if offset + byte_length > len(blob):
      raise CheckpointFormatError(f'blob truncated inside {name!r}', field='blob')
    array = np.frombuffer(blob[offset:offset + byte_length], dtype=dtype).reshape(shape)
    arrays[name] = array.astype(dtype.newbyteorder('='), copy=True)
  return Container(arrays=arrays, step=step, metadata=metadata)


def _entry_name(entry: Any, position: int) -> str:
  if not isinstance(entry, dict) or not isinstance(entry.get('name'), str) or not entry['name']:
    raise CheckpointFormatError(f'entry {position} has no name', field='name')
  return entry['name']


def write_container(container: Container, path: PathLike) -> Path:
  target = Path(path)
  target.parent.mkdir(parents=True, exist_ok=True)
  staging = target.with_name(target.name + '.partial')
  staging.write_bytes(encode_container(container))
  os.replace(staging, target)
  return target


def read_container(path: PathLike) -> Container:
  source = Path(path)
  if not source.is_file():
    raise CheckpointFormatError(f'checkpoint not found: {source}', field='path')
  return decode_container(source.read_bytes())


def save_checkpoint(params: ParameterStore, path: PathLike, metadata: Optional[Mapping[str, Any]] = None) -> Path:
  payload = dict(metadata or {})
  payload['store_dtype'] = _dtype_code(params.dtype)
  container = Container(
    arrays={name: params[name] for name in params},
    step=params.step,
    metadata=payload
  )
  target = write_container(container, path)
  logger.info('Wrote checkpoint %s (%d entries, step %d)', target, len(params), params.step)
  return target


def load_checkpoint(path: PathLike) -> ParameterStore:
  container = read_container(path)
  code = container.metadata.get('store_dtype', 'f32')
  if code not in _DTYPES:
    raise CheckpointFormatError(f'unknown store dtype {code!r}', field='store_dtype')
  store = ParameterStore(dtype=_DTYPES[code].newbyteorder('='))
  for name, array in container.arrays.items():
    if array.dtype != store.dtype:
      raise CheckpointFormatError(f'entry {name!r} is {array.dtype}, store is {store.dtype}', field='dtype')
    store.add(name, array)
  store.step = container.step
  return store


def checkpoint_metadata(path: PathLike) -> Dict[str, Any]:
  return read_container(path).metadata
