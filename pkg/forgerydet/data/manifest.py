"""Line-delimited sample manifests and image I/O.

Each line is one JSON object (UTF-8, non-ASCII kept literal, JSON string escaping)
with the fields ``id, path, label, source, width, height, face_box, rationale,
split`` in that order; fields not listed are preserved verbatim after them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from forgerydet.core.errors import InvalidArgumentError, ManifestError
from forgerydet.core.tensor import FeatureMap

SOURCES: Tuple[str, ...] = ('real', 'blend_partial', 'smooth_full')
FORGED_SOURCES: Tuple[str, ...] = SOURCES[1:]
SPLITS: Tuple[str, ...] = ('train', 'val', 'test')
FIELD_ORDER: Tuple[str, ...] = ('id', 'path', 'label', 'source', 'width', 'height', 'face_box', 'rationale', 'split')


@dataclass
class Sample:
  id: str
  path: str
  label: int
  source: str
  width: int
  height: int
  face_box: Optional[List[int]] = None
  rationale: Optional[List[int]] = None
  split: Optional[str] = None
  extras: Dict[str, Any] = field(default_factory=dict)

  def validate(self) -> 'Sample':
    if not self.id:
      raise ManifestError('sample id must be non-empty', sample_id=self.id)
    if self.source not in SOURCES:
      raise ManifestError(f'unknown source {self.source!r}', sample_id=self.id)
    if self.label not in (0, 1) or (self.label == 0) != (self.source == 'real'):
      raise ManifestError(f'label {self.label!r} inconsistent with source {self.source!r}', sample_id=self.id)
    if self.width < 1 or self.height < 1:
      raise ManifestError('image size must be positive', sample_id=self.id)
    if self.face_box is not None:
      if len(self.face_box) != 4:
        raise ManifestError('face_box must be [x, y, w, h]', sample_id=self.id)
      x, y, w, h = self.face_box
      if x < 0 or y < 0 or w < 1 or h < 1 or x + w > self.width or y + h > self.height:
        raise ManifestError(f'face_box {self.face_box} exceeds {self.width}x{self.height} image bounds', sample_id=self.id)
    if self.split is not None and self.split not in SPLITS:
      raise ManifestError(f'unknown split {self.split!r}', sample_id=self.id)
    return self

  def to_record(self) -> Dict[str, Any]:
    record: Dict[str, Any] = {
      'id': self.id,
      'path': self.path,
      'label': self.label,
      'source': self.source,
      'width': self.width,
      'height': self.height,
      'face_box': self.face_box,
      'rationale': self.rationale,
      'split': self.split
    }
    for key, value in self.extras.items():
      record.setdefault(key, value)
    return record

  @classmethod
  def from_record(cls, record: Dict[str, Any], line: Optional[int] = None) -> 'Sample':
    sample_id = record.get('id')
    try:
      sample = cls(
        id=str(record['id']),
        path=str(record['path']),
        label=_strict_int(record['label']),
        source=str(record['source']),
        width=_strict_int(record['width']),
        height=_strict_int(record['height']),
        face_box=_int_list(record.get('face_box')),
        rationale=_int_list(record.get('rationale')),
        split=record.get('split'),
        extras={key: value for key, value in record.items() if key not in FIELD_ORDER}
      )
    except KeyError as exc:
      raise ManifestError(f'missing field {exc.args[0]!r}', line=line, sample_id=sample_id) from None
    except (TypeError, ValueError) as exc:
      raise ManifestError(f'invalid field value: {exc}', line=line, sample_id=sample_id) from None
    return sample.validate()


def _strict_int(value: Any) -> int:
  if isinstance(value, bool) or not isinstance(value, int):
    raise ValueError(f'expected an integer, got {value!r}')
  return value


def _int_list(value: Any) -> Optional[List[int]]:
  if value is None:
    return None
  if not isinstance(value, list):
    raise ValueError(f'expected a list, got {value!r}')
  return [_strict_int(item) for item in value]


def read_manifest(path: Union[str, Path]) -> List[Sample]:
  samples: List[Sample] = []
  with Path(path).open('r', encoding='utf-8') as handle:
    for number, line in enumerate(handle, start=1):
      if not line.strip():
        continue
      try:
        record = json.loads(line)
      except json.JSONDecodeError as exc:
        raise ManifestError(f'malformed record at line {number}: {exc.msg}', line=number) from None
      if not isinstance(record, dict):
        raise ManifestError(f'record at line {number} is not an object', line=number)
      samples.append(Sample.from_record(record, line=number))
  return samples


def write_manifest(samples: Iterable[Sample], path: Union[str, Path]) -> Path:
  target = Path(path)
  target.parent.mkdir(parents=True, exist_ok=True)
  lines = [json.dumps(sample.validate().to_record(), ensure_ascii=False) for sample in samples]
  target.write_text(''.join(line + '\n' for line in lines), encoding='utf-8')
  return target


def filter_split(samples: Iterable[Sample], split: Optional[str]) -> List[Sample]:
  if split is None:
    return list(samples)
  if split not in SPLITS:
    raise InvalidArgumentError(f'unknown split {split!r}')
  return [sample for sample in samples if sample.split == split]


def load_image(path: Union[str, Path]) -> FeatureMap:
  """8-bit RGB file → 3×H×W FeatureMap scaled to [0, 1]."""
  try:
    with Image.open(path) as img:
      pixels = np.asarray(img.convert('RGB'), dtype=np.float64) / 255.0
  except (UnidentifiedImageError, OSError) as exc:
    raise OSError(f'cannot read image {path}: {exc}') from None
  return FeatureMap(pixels.transpose(2, 0, 1))


def save_image(pixels: np.ndarray, path: Union[str, Path]) -> Path:
  """H×W×3 array in [0, 1] → lossless 8-bit PNG."""
  target = Path(path)
  target.parent.mkdir(parents=True, exist_ok=True)
  quantized = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
  Image.fromarray(quantized, mode='RGB').save(target, format='PNG')
  return target
