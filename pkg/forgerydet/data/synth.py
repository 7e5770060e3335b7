"""Procedural portrait corpus with two forgery classes.

``real``           textured background, elliptical face with skin texture, eyes, mouth
``blend_partial``  a differently toned donor face composited inside the face with a
                   narrow alpha ramp (sharp, fine-scale boundary)
``smooth_full``    the whole frame low-passed and texture-flattened (coarse anomaly)

Every sample draws from its own generator seeded with ``(seed, index)``, so serial
and parallel generation produce identical bytes.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from forgerydet.core.errors import InvalidArgumentError
from forgerydet.core.tensor import FeatureMap, GaussianSpec, MapLike, as_array, smooth_array
from forgerydet.data.manifest import SOURCES, SPLITS, Sample, save_image, write_manifest
from forgerydet.models.ctx_branch import RationaleSequence

logger = logging.getLogger(__name__)

DEFAULT_MIX = {'real': 0.5, 'blend_partial': 0.25, 'smooth_full': 0.25}
SENSOR_NOISE = 0.03
BLEND_RADIUS = 0.85
MIN_DONOR_TONE_GAP = 0.15
MANIFEST_NAME = 'manifest.jsonl'
IMAGE_DIR = 'images'


def parse_mix(text: str) -> Dict[str, float]:
  """``real:0.5,blend_partial:0.25`` → mapping; sums are checked by CorpusSpec."""
  mix: Dict[str, float] = {}
  for part in filter(None, (chunk.strip() for chunk in str(text).split(','))):
    name, sep, value = part.partition(':')
    if not sep:
      raise InvalidArgumentError(f'mix entry {part!r} must look like source:proportion')
    try:
      mix[name.strip()] = float(value)
    except ValueError:
      raise InvalidArgumentError(f'mix proportion {value!r} is not a number') from None
  return mix


def format_mix(mix: Dict[str, float]) -> str:
  return ','.join(f'{name}:{mix[name]:g}' for name in mix)


@dataclass
class CorpusSpec:
  n: int
  mix: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MIX))
  seed: int = 0
  image_size: int = 96
  blend_softness: Tuple[float, float] = (0.5, 1.5)
  smooth_sigma: Tuple[float, float] = (1.5, 3.0)
  split_fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15)

  def __post_init__(self) -> None:
    if self.n < 3:
      raise InvalidArgumentError(f'corpus size must be >= 3, got {self.n}')
    if self.seed < 0:
      raise InvalidArgumentError(f'seed must be non-negative, got {self.seed}')
    unknown = sorted(set(self.mix) - set(SOURCES))
    if unknown:
      raise InvalidArgumentError(f'mix names unknown sources {unknown}')
    if any(value < 0 or not math.isfinite(value) for value in self.mix.values()):
      raise InvalidArgumentError('mix proportions must be non-negative')
    if abs(sum(self.mix.values()) - 1.0) > 1e-9:
      raise InvalidArgumentError(f'mix proportions sum to {sum(self.mix.values()):g}, expected 1')
    if self.image_size < 32 or self.image_size % 8:
      raise InvalidArgumentError(f'image size must be a multiple of 8 and >= 32, got {self.image_size}')
    for name, (low, high) in (('blend_softness', self.blend_softness), ('smooth_sigma', self.smooth_sigma)):
      if not 0 < low <= high:
        raise InvalidArgumentError(f'{name} must be an increasing positive range, got {(low, high)}')

  def source_counts(self) -> Dict[str, int]:
    """Largest-remainder allocation of ``n`` over the mix, in SOURCES order."""
    quotas = {name: self.n * self.mix.get(name, 0.0) for name in SOURCES}
    counts = {name: int(math.floor(q)) for name, q in quotas.items()}
    remainder = self.n - sum(counts.values())
    for name in sorted(SOURCES, key=lambda s: (-(quotas[s] - counts[s]), SOURCES.index(s)))[:remainder]:
      counts[name] += 1
    return counts


@dataclass
class FaceGeometry:
  cx: float
  cy: float
  a: float
  b: float

  def radius(self, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    return np.sqrt(((xx - self.cx) / self.a) ** 2 + ((yy - self.cy) / self.b) ** 2)

  def signed_distance(self, xx: np.ndarray, yy: np.ndarray, level: float) -> np.ndarray:
    """Approximate pixel distance inside (positive) the ellipse scaled by ``level``."""
    return (level - self.radius(xx, yy)) * min(self.a, self.b)

  def box(self, size: int) -> List[int]:
    x0 = max(0, int(math.floor(self.cx - self.a)))
    y0 = max(0, int(math.floor(self.cy - self.b)))
    x1 = min(size, int(math.ceil(self.cx + self.a)))
    y1 = min(size, int(math.ceil(self.cy + self.b)))
    return [x0, y0, x1 - x0, y1 - y0]


@dataclass
class Portrait:
  pixels: np.ndarray
  geometry: FaceGeometry
  tone: np.ndarray


@dataclass
class BlendPair:
  original: np.ndarray
  blended: np.ndarray
  band: np.ndarray
  geometry: FaceGeometry


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
  yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
  return xx, yy


def _ramp(distance: np.ndarray, width: float) -> np.ndarray:
  return np.clip(0.5 + distance / width, 0.0, 1.0)[..., np.newaxis]


def _textured_noise(rng: np.random.Generator, size: int, sigma: float, std: float) -> np.ndarray:
  noise = gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(sigma, sigma, 0), mode='reflect')
  return noise * (std / max(float(noise.std()), 1e-12))


def _paint_ellipse(canvas: np.ndarray, xx, yy, cx, cy, rx, ry, color) -> None:
  distance = (1.0 - np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)) * min(rx, ry)
  alpha = _ramp(distance, 1.0)
  canvas[...] = canvas * (1.0 - alpha) + np.asarray(color) * alpha


def _face_layer(
  rng: np.random.Generator,
  size: int,
  geometry: FaceGeometry,
  tone: np.ndarray,
  mouth_gain: float = 1.0
) -> np.ndarray:
  xx, yy = _grid(size)
  shading = 1.0 - 0.12 * np.clip(geometry.radius(xx, yy), 0.0, 1.5) ** 2
  layer = tone * shading[..., np.newaxis] + _textured_noise(rng, size, 1.2, 0.025)
  jitter = rng.uniform(-1.0, 1.0, size=4)
  eye_color = np.array([0.15, 0.12, 0.10]) * rng.uniform(0.8, 1.2)
  for side in (-1.0, 1.0):
    _paint_ellipse(
      layer, xx, yy,
      geometry.cx + side * 0.4 * geometry.a + jitter[0], geometry.cy - 0.18 * geometry.b + jitter[1],
      0.13 * geometry.a, 0.07 * geometry.b, eye_color
    )
  mouth = np.clip(np.array([0.62, 0.26, 0.26]) * mouth_gain, 0.0, 1.0)
  _paint_ellipse(
    layer, xx, yy,
    geometry.cx + jitter[2], geometry.cy + 0.45 * geometry.b + jitter[3],
    0.28 * geometry.a, 0.07 * geometry.b, mouth
  )
  return layer + rng.normal(0.0, SENSOR_NOISE, size=layer.shape)


def _skin_tone(rng: np.random.Generator) -> np.ndarray:
  return np.clip(np.array([0.78, 0.58, 0.47]) * rng.uniform(0.6, 1.1) + rng.uniform(-0.03, 0.03, size=3), 0.05, 0.95)


def render_portrait(rng: np.random.Generator, size: int = 96) -> Portrait:
  xx, yy = _grid(size)
  background = rng.uniform(0.2, 0.8, size=3) + _textured_noise(rng, size, 6.0, 0.08)
  background = background + rng.normal(0.0, SENSOR_NOISE, size=background.shape)
  geometry = FaceGeometry(
    cx=size / 2 + rng.uniform(-3.0, 3.0),
    cy=size / 2 + rng.uniform(-3.0, 3.0),
    a=size * rng.uniform(0.24, 0.28),
    b=size * rng.uniform(0.31, 0.35)
  )
  tone = _skin_tone(rng)
  face = _face_layer(rng, size, geometry, tone)
  alpha = _ramp(geometry.signed_distance(xx, yy, 1.0), 1.0)
  pixels = background * (1.0 - alpha) + face * alpha
  return Portrait(pixels=np.clip(pixels, 0.0, 1.0), geometry=geometry, tone=tone)


def donor_tone(rng: np.random.Generator, tone: np.ndarray) -> np.ndarray:
  shift = rng.uniform(MIN_DONOR_TONE_GAP, MIN_DONOR_TONE_GAP + 0.1)
  sign = -1.0 if float(tone.mean()) > 0.5 else 1.0
  return np.clip(tone + sign * shift, 0.02, 0.98)


def blend_pair(rng: np.random.Generator, size: int = 96, softness: Tuple[float, float] = (0.5, 1.5)) -> BlendPair:
  """Render a portrait and its donor-blended counterpart plus the ±3 px boundary band."""
  portrait = render_portrait(rng, size)
  geometry = portrait.geometry
  donor = _face_layer(rng, size, geometry, donor_tone(rng, portrait.tone), mouth_gain=rng.uniform(1.1, 1.4))
  xx, yy = _grid(size)
  distance = geometry.signed_distance(xx, yy, BLEND_RADIUS)
  alpha = _ramp(distance, rng.uniform(*softness))
  blended = np.clip(portrait.pixels * (1.0 - alpha) + donor * alpha, 0.0, 1.0)
  return BlendPair(original=portrait.pixels, blended=blended, band=np.abs(distance) <= 3.0, geometry=geometry)


def smooth_portrait(rng: np.random.Generator, size: int = 96, sigma_range: Tuple[float, float] = (1.5, 3.0)) -> Portrait:
  portrait = render_portrait(rng, size)
  sigma = rng.uniform(*sigma_range)
  smoothed = gaussian_filter(portrait.pixels, sigma=(sigma, sigma, 0), mode='reflect')
  local = gaussian_filter(portrait.pixels, sigma=(4 * sigma, 4 * sigma, 0), mode='reflect')
  flattened = local + 0.6 * (smoothed - local)
  return Portrait(pixels=np.clip(flattened, 0.0, 1.0), geometry=portrait.geometry, tone=portrait.tone)


def render_sample(spec: CorpusSpec, index: int, source: str) -> Portrait:
  rng = np.random.default_rng([spec.seed, index])
  if source == 'blend_partial':
    pair = blend_pair(rng, spec.image_size, spec.blend_softness)
    return Portrait(pixels=pair.blended, geometry=pair.geometry, tone=np.zeros(3))
  if source == 'smooth_full':
    return smooth_portrait(rng, spec.image_size, spec.smooth_sigma)
  return render_portrait(rng, spec.image_size)


def assign_sources(spec: CorpusSpec) -> List[str]:
  counts = spec.source_counts()
  ordered = [name for name in SOURCES for _ in range(counts[name])]
  permutation = np.random.default_rng(spec.seed).permutation(len(ordered))
  return [ordered[i] for i in permutation]


def assign_splits(sources: Sequence[str], fractions: Tuple[float, float, float]) -> List[str]:
  """Stratified by source: the first 70% of each source's samples train, the next 15% validate."""
  splits = [''] * len(sources)
  for source in SOURCES:
    positions = [i for i, s in enumerate(sources) if s == source]
    n_train = int(round(fractions[0] * len(positions)))
    n_val = int(round(fractions[1] * len(positions)))
    for rank, position in enumerate(positions):
      splits[position] = SPLITS[0] if rank < n_train else SPLITS[1] if rank < n_train + n_val else SPLITS[2]
  return splits


def generate_corpus(spec: CorpusSpec, out_dir: Union[str, Path], workers: int = 1) -> List[Sample]:
  root = Path(out_dir)
  (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
  sources = assign_sources(spec)
  splits = assign_splits(sources, spec.split_fractions)
  width = max(5, len(str(spec.n - 1)))

  def build(index: int) -> Sample:
    source = sources[index]
    portrait = render_sample(spec, index, source)
    sample_id = f'img_{index:0{width}d}'
    relative = f'{IMAGE_DIR}/{sample_id}.png'
    save_image(portrait.pixels, root / relative)
    return Sample(
      id=sample_id,
      path=relative,
      label=0 if source == 'real' else 1,
      source=source,
      width=spec.image_size,
      height=spec.image_size,
      face_box=portrait.geometry.box(spec.image_size),
      rationale=list(RationaleSequence.for_source(source).ids),
      split=splits[index]
    )

  if workers > 1:
    with ThreadPoolExecutor(max_workers=workers) as pool:
      samples = list(pool.map(build, range(spec.n)))
  else:
    samples = [build(index) for index in range(spec.n)]
  write_manifest(samples, root / MANIFEST_NAME)
  logger.info('Generated %d samples under %s (%s)', spec.n, root, format_mix(spec.mix))
  return samples


def _channel_last(image: MapLike) -> np.ndarray:
  array = as_array(image)
  if isinstance(image, FeatureMap) or (array.ndim == 3 and array.shape[0] == 3 and array.shape[2] != 3):
    array = array.transpose(1, 2, 0)
  return np.asarray(array, dtype=np.float64)


def fine_residual(image: MapLike) -> np.ndarray:
  """σ=1 residual ``x − G_1(x)`` of an H×W×3 image (or 3×H×W map), channel-last."""
  channels = _channel_last(image).transpose(2, 0, 1)
  residual = channels - smooth_array(channels, GaussianSpec(1.0))
  return residual.transpose(1, 2, 0)


def band_energy(image: MapLike, band: np.ndarray) -> float:
  residual = fine_residual(image)
  return float(np.mean(residual[band] ** 2))


def residual_energy_features(image: MapLike) -> np.ndarray:
  """(fine, coarse) mean energies: ``x − G_1 x`` and the ``G_1 x − G_4 x`` band."""
  channels = _channel_last(image).transpose(2, 0, 1)
  fine_smooth = smooth_array(channels, GaussianSpec(1.0))
  coarse_smooth = smooth_array(channels, GaussianSpec(4.0))
  fine = np.mean((channels - fine_smooth) ** 2)
  coarse = np.mean((fine_smooth - coarse_smooth) ** 2)
  return np.array([fine, coarse])


def energy_score(features: np.ndarray) -> float:
  """Fixed linear gradient on log energies; large values indicate fine-scale content."""
  fine, coarse = np.log(np.maximum(features, 1e-12))
  return float(fine - coarse)

