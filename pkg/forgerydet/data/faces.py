from __future__ import annotations

import importlib
import logging
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from cachetools import LRUCache, cached
from scipy.ndimage import zoom

from forgerydet.core.errors import InvalidArgumentError
from forgerydet.core.tensor import FeatureMap, MapLike, as_array
from forgerydet.data.manifest import Sample

logger = logging.getLogger(__name__)

MAX_FACES = 5

BoxProvider = Callable[[np.ndarray, Sample], Sequence[Sequence[int]]]


class CropProvider(str, Enum):
  MANIFEST_BOX = 'manifest_box'
  CENTER_SQUARE = 'center_square'
  EXTERNAL = 'external'


@dataclass
class FaceCrop:
  box: List[int]
  pixels: FeatureMap
  provider: str
  fallback: bool = False

  @property
  def area(self) -> int:
    return self.box[2] * self.box[3]


def center_square_box(height: int, width: int) -> List[int]:
  side = max(1, int(round(2.0 * min(height, width) / 3.0)))
  return [(width - side) // 2, (height - side) // 2, side, side]


@cached(cache=LRUCache(maxsize=16), lock=threading.Lock())
def resolve_external_provider(entry_point: str) -> BoxProvider:
  """``package.module:function`` → callable ``(image 3×H×W, sample) -> boxes``."""
  module_name, sep, attribute = entry_point.partition(':')
  if not sep or not module_name or not attribute:
    raise InvalidArgumentError(f'external provider must be "module:function", got {entry_point!r}')
  try:
    provider = getattr(importlib.import_module(module_name), attribute)
  except (ImportError, AttributeError) as exc:
    raise InvalidArgumentError(f'cannot load external provider {entry_point!r}: {exc}') from None
  if not callable(provider):
    raise InvalidArgumentError(f'external provider {entry_point!r} is not callable')
  return provider


def _clip_box(box: Sequence[int], height: int, width: int) -> Optional[List[int]]:
  if len(box) != 4:
    raise InvalidArgumentError(f'face boxes must be [x, y, w, h], got {list(box)}')
  x, y, w, h = (int(v) for v in box)
  x0, y0 = max(0, x), max(0, y)
  x1, y1 = min(width, x + w), min(height, y + h)
  if x1 <= x0 or y1 <= y0:
    return None
  return [x0, y0, x1 - x0, y1 - y0]


def resize_crop(region: np.ndarray, size: int) -> np.ndarray:
  _, h, w = region.shape
  if (h, w) == (size, size):
    return region.copy()
  resized = zoom(region, (1.0, size / h, size / w), order=1, mode='nearest')
  return resized[:, :size, :size]


def crop_faces(
  image: MapLike,
  sample: Sample,
  provider: Union[CropProvider, str] = CropProvider.MANIFEST_BOX,
  size: int = 64,
  external: Optional[Union[str, BoxProvider]] = None,
  max_faces: int = MAX_FACES
) -> List[FaceCrop]:
  """Crop up to ``max_faces`` face regions, largest area first, resized to ``size``×``size``.

  Ties in area go to the smaller x, then the smaller y. The manifest provider falls
  back to the centered square when the sample has no box; those crops carry
  ``fallback=True``.
  """
  array = as_array(image)
  if array.ndim != 3 or array.shape[0] != 3:
    raise InvalidArgumentError(f'crop_faces expects a 3×H×W image, got {array.shape}')
  _, height, width = array.shape
  provider = CropProvider(provider)
  fallback = False
  if provider is CropProvider.MANIFEST_BOX:
    if sample.face_box is None:
      logger.debug('Sample %s has no face box; using the centered square', sample.id)
      boxes, fallback = [center_square_box(height, width)], True
    else:
      boxes = [sample.face_box]
  elif provider is CropProvider.CENTER_SQUARE:
    boxes = [center_square_box(height, width)]
  else:
    if external is None:
      raise InvalidArgumentError('the external crop provider needs an entry point')
    function = resolve_external_provider(external) if isinstance(external, str) else external
    boxes = list(function(array, sample))
    if not boxes:
      boxes, fallback = [center_square_box(height, width)], True

  clipped = [box for box in (_clip_box(b, height, width) for b in boxes) if box is not None]
  if not clipped:
    clipped, fallback = [center_square_box(height, width)], True
  clipped.sort(key=lambda box: (-box[2] * box[3], box[0], box[1]))
  crops = []
  for x, y, w, h in clipped[:max_faces]:
    region = array[:, y:y + h, x:x + w]
    crops.append(FaceCrop(box=[x, y, w, h], pixels=FeatureMap(resize_crop(region, size)), provider=provider.value, fallback=fallback))
  return crops
