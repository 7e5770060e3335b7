from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, Extra, Field, ValidationError, validator

from forgerydet.core.errors import InvalidArgumentError, UsageError
from forgerydet.core.tensor import Padding
from forgerydet.data.faces import CropProvider
from forgerydet.data.synth import CorpusSpec, parse_mix
from forgerydet.models.adalog import ScaleBank
from forgerydet.models.ctx_backends import CtxConfig
from forgerydet.models.ctx_branch import Pooling
from forgerydet.models.face_moe import EXPERT_NAMES, FaceConfig
from forgerydet.models.fusion import FusionMode

logger = logging.getLogger(__name__)

ENV_PREFIX = 'HUFOR_'
STAGES = ('ctx', 'face', 'fusion')
PATH_KEYS = ('out', 'corpus_dir', 'checkpoint_dir', 'manifest', 'recorded_contexts')

load_dotenv(os.getenv('HUFOR_ENV_FILE', '.env'))


@dataclass
class Settings:
  """Process-level settings derived from environment variables."""

  log_level: str = field(default_factory=lambda: os.getenv('HUFOR_LOG_LEVEL', 'info'))
  events_enabled: bool = field(default_factory=lambda: os.getenv('HUFOR_EVENTS', 'true').lower() == 'true')
  env_file: str = field(default_factory=lambda: os.getenv('HUFOR_ENV_FILE', '.env'))

  @classmethod
  def env_keys(cls) -> Tuple[str, ...]:
    return ('LOG_LEVEL', 'EVENTS', 'ENV_FILE')


settings = Settings()


def _split_list(value: str) -> List[str]:
  return [item.strip() for item in str(value).split(',') if item.strip()]


def _parse_bank(value: str, name: str) -> Tuple[float, ...]:
  try:
    return ScaleBank(tuple(float(item) for item in _split_list(value))).sigmas
  except (ValueError, InvalidArgumentError) as exc:
    raise ValueError(f'{name} must be comma-separated increasing positive sigmas ({exc})') from None


class RunConfig(BaseModel):
  """Every run-level key with its default; unknown keys are rejected."""

  seed: int = Field(default=7, ge=0)
  out: Optional[str] = Field(default=None)
  corpus_dir: Optional[str] = Field(default=None)
  checkpoint_dir: Optional[str] = Field(default=None)
  manifest: Optional[str] = Field(default=None)

  n: int = Field(default=600, ge=3)
  mix: str = Field(default='real:0.5,blend_partial:0.25,smooth_full:0.25')
  image_size: int = Field(default=96, ge=32)
  blend_softness_min: float = Field(default=0.5, gt=0)
  blend_softness_max: float = Field(default=1.5, gt=0)
  smooth_sigma_min: float = Field(default=1.5, gt=0)
  smooth_sigma_max: float = Field(default=3.0, gt=0)
  workers: int = Field(default=1, ge=1, le=64)

  face_input_size: int = Field(default=64, ge=8)
  face_channels: int = Field(default=12, ge=1)
  feature_dim: int = Field(default=128, ge=1)
  face_experts: str = Field(default=','.join(EXPERT_NAMES))
  moe_layers: int = Field(default=1, ge=0, le=4)
  fine_bank: str = Field(default='1,4,7')
  coarse_bank: str = Field(default='9,12,15')
  controller_hidden: int = Field(default=16, ge=1)
  adalog_adaptive: bool = Field(default=True)
  gate_energy: bool = Field(default=True)
  padding: Padding = Field(default=Padding.REFLECT)

  ctx_backend: str = Field(default='toy')
  ctx_embed_dim: int = Field(default=32, ge=1)
  ctx_global_dim: int = Field(default=16, ge=1)
  ctx_pooling: Pooling = Field(default=Pooling.MAX)
  recorded_contexts: Optional[str] = Field(default=None)
  head_hidden: int = Field(default=64, ge=1)

  fusion_mode: FusionMode = Field(default=FusionMode.WEIGHT_FACE)
  crop_provider: CropProvider = Field(default=CropProvider.MANIFEST_BOX)
  external_provider: Optional[str] = Field(default=None)
  face_aggregation: str = Field(default='max')

  lr_ctx: float = Field(default=1e-2, ge=0)
  lr_face: float = Field(default=1e-2, ge=0)
  lr_fusion: float = Field(default=1e-2, ge=0)
  momentum: float = Field(default=0.9, ge=0, lt=1)
  batch_size: int = Field(default=16, ge=1)
  epochs_ctx: int = Field(default=20, ge=0)
  epochs_face: int = Field(default=30, ge=0)
  epochs_fusion: int = Field(default=20, ge=0)

  class Config:
    extra = Extra.forbid
    validate_assignment = True

  @validator('mix')
  def _check_mix(cls, value: str) -> str:
    try:
      CorpusSpec(n=3, mix=parse_mix(value))
    except InvalidArgumentError as exc:
      raise ValueError(str(exc)) from None
    return value

  @validator('face_experts')
  def _check_experts(cls, value: str) -> str:
    names = _split_list(value)
    unknown = [name for name in names if name not in EXPERT_NAMES]
    if not names or unknown or len(set(names)) != len(names):
      raise ValueError(f'must be a non-empty list of distinct experts from {list(EXPERT_NAMES)}')
    return ','.join(names)

  @validator('fine_bank', 'coarse_bank')
  def _check_bank(cls, value: str, field) -> str:
    _parse_bank(value, field.name)
    return value

  @validator('ctx_backend')
  def _check_backend(cls, value: str) -> str:
    if value not in ('mock', 'toy', 'recorded'):
      raise ValueError('must be one of mock, toy, recorded')
    return value

  @validator('face_aggregation')
  def _check_aggregation(cls, value: str) -> str:
    if value not in ('max', 'mean'):
      raise ValueError('must be max or mean')
    return value

  @validator('blend_softness_max')
  def _check_softness(cls, value: float, values: Dict[str, Any]) -> float:
    if 'blend_softness_min' in values and value < values['blend_softness_min']:
      raise ValueError('must be >= blend_softness_min')
    return value

  @validator('smooth_sigma_max')
  def _check_sigma(cls, value: float, values: Dict[str, Any]) -> float:
    if 'smooth_sigma_min' in values and value < values['smooth_sigma_min']:
      raise ValueError('must be >= smooth_sigma_min')
    return value

  def output_dir(self) -> Path:
    if not self.out:
      raise UsageError('an output directory is required (--out or the "out" key)')
    return Path(self.out)

  def corpus_path(self) -> Path:
    return Path(self.corpus_dir) if self.corpus_dir else self.output_dir() / 'corpus'

  def manifest_path(self) -> Path:
    return Path(self.manifest) if self.manifest else self.corpus_path() / 'manifest.jsonl'

  def checkpoint_path(self, stage: str) -> Path:
    root = Path(self.checkpoint_dir) if self.checkpoint_dir else self.output_dir() / 'checkpoints'
    return root / f'{stage}.ckpt'

  def corpus_spec(self) -> CorpusSpec:
    return CorpusSpec(
      n=self.n,
      mix=parse_mix(self.mix),
      seed=self.seed,
      image_size=self.image_size,
      blend_softness=(self.blend_softness_min, self.blend_softness_max),
      smooth_sigma=(self.smooth_sigma_min, self.smooth_sigma_max)
    )

  def face_config(self) -> FaceConfig:
    return FaceConfig(
      channels=self.face_channels,
      embed_dim=self.feature_dim,
      input_size=self.face_input_size,
      experts=tuple(_split_list(self.face_experts)),
      moe_layers=self.moe_layers,
      controller_hidden=self.controller_hidden,
      fine_bank=_parse_bank(self.fine_bank, 'fine_bank'),
      coarse_bank=_parse_bank(self.coarse_bank, 'coarse_bank'),
      padding=Padding(self.padding),
      adaptive=self.adalog_adaptive,
      gate_energy=self.gate_energy
    )

  def ctx_config(self) -> CtxConfig:
    return CtxConfig(embed_dim=self.ctx_embed_dim, global_dim=self.ctx_global_dim)

  def snapshot(self, include_paths: bool = False) -> Dict[str, Any]:
    """JSON-ready key/value view with enums flattened, in schema order; location keys are dropped by default."""
    return {
      key: (value.value if hasattr(value, 'value') else value)
      for key, value in self.dict().items()
      if include_paths or key not in PATH_KEYS
    }


def parse_config_text(text: str, source: str = '<config>') -> Dict[str, str]:
  values: Dict[str, str] = {}
  for number, raw in enumerate(text.splitlines(), start=1):
    line = raw.split('#', 1)[0].strip()
    if not line:
      continue
    key, sep, value = line.partition('=')
    if not sep or not key.strip():
      raise InvalidArgumentError(f'{source}:{number}: expected "key = value"')
    values[key.strip()] = value.strip()
  return values


def _reject_unknown(keys, origin: str) -> None:
  known = set(RunConfig.__fields__)
  unknown = [key for key in keys if key not in known]
  if unknown:
    raise InvalidArgumentError(f'unknown configuration key {unknown[0]!r} in {origin}')


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
  environ = os.environ if environ is None else environ
  known = set(RunConfig.__fields__)
  values: Dict[str, str] = {}
  for name in sorted(environ):
    if not name.startswith(ENV_PREFIX):
      continue
    suffix = name[len(ENV_PREFIX):]
    key = suffix.lower()
    if key in known:
      values[key] = environ[name]
    elif suffix not in Settings.env_keys():
      logger.warning('Ignoring %s: not a configuration key', name)
  return values


def load_run_config(
  path: Optional[Union[str, Path]] = None,
  overrides: Optional[Mapping[str, Any]] = None,
  environ: Optional[Mapping[str, str]] = None
) -> RunConfig:
  """Defaults < config file < HUFOR_* environment < explicit overrides."""
  merged: Dict[str, Any] = {}
  if path is not None:
    config_path = Path(path)
    if not config_path.is_file():
      raise UsageError(f'config file not found: {config_path}')
    file_values = parse_config_text(config_path.read_text(encoding='utf-8'), str(config_path))
    _reject_unknown(file_values, str(config_path))
    merged.update(file_values)
  merged.update(env_overrides(environ))
  explicit = {key: value for key, value in (overrides or {}).items() if value is not None}
  _reject_unknown(explicit, 'overrides')
  merged.update(explicit)
  try:
    return RunConfig(**merged)
  except ValidationError as exc:
    first = exc.errors()[0]
    key = '.'.join(str(part) for part in first['loc'])
    raise InvalidArgumentError(f'invalid value for {key!r}: {first["msg"]}') from None
