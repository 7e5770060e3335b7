from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from forgerydet.config import RunConfig
from forgerydet.core.errors import InvalidArgumentError
from forgerydet.data.faces import FaceCrop, crop_faces, resize_crop
from forgerydet.data.manifest import Sample, load_image

logger = logging.getLogger(__name__)


@dataclass
class PreparedSample:
  """One manifest entry with its decoded image and face crops, or the reason it failed."""

  sample: Sample
  image: Optional[np.ndarray] = None
  crops: List[FaceCrop] = field(default_factory=list)
  error: Optional[str] = None

  @property
  def ok(self) -> bool:
    return self.error is None

  def crop_batch(self) -> np.ndarray:
    return np.stack([crop.pixels.data for crop in self.crops])


def image_path(sample: Sample, root: Union[str, Path]) -> Path:
  path = Path(sample.path)
  return path if path.is_absolute() else Path(root) / path


def prepare_sample(sample: Sample, root: Union[str, Path], config: RunConfig) -> PreparedSample:
  try:
    image = load_image(image_path(sample, root))
  except OSError as exc:
    logger.warning('Skipping %s: %s', sample.id, exc)
    return PreparedSample(sample=sample, error=str(exc))
  crops = crop_faces(
    image,
    sample,
    provider=config.crop_provider,
    size=config.face_input_size,
    external=config.external_provider
  )
  frame = image.data
  if frame.shape[1:] != (config.image_size, config.image_size):
    # context encoders see a fixed square frame; crops keep source geometry
    logger.debug('Resizing %s frame %s to %d', sample.id, frame.shape[1:], config.image_size)
    frame = resize_crop(frame, config.image_size)
  return PreparedSample(sample=sample, image=frame, crops=crops)


def prepare_samples(
  samples: Sequence[Sample],
  root: Union[str, Path],
  config: RunConfig
) -> List[PreparedSample]:
  """Decode and crop in manifest order; ``config.workers`` threads share the work."""
  if config.workers > 1 and len(samples) > 1:
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
      return list(pool.map(lambda sample: prepare_sample(sample, root, config), samples))
  return [prepare_sample(sample, root, config) for sample in samples]


def stack_images(prepared: Sequence[PreparedSample]) -> np.ndarray:
  shapes = {item.image.shape for item in prepared}
  if len(shapes) != 1:
    raise InvalidArgumentError(f'images in one batch must share a shape, got {sorted(shapes)}')
  return np.stack([item.image for item in prepared])
