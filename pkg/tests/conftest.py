from __future__ import annotations

from pathlib import Path
from typing import Any, Callable, Dict, List

import numpy as np
import pytest

from forgerydet.config import RunConfig, load_run_config
from forgerydet.data.synth import generate_corpus
from forgerydet.training.stages import StageRunner

# Small enough that a full three-stage run takes seconds.
SMALL_SETTINGS: Dict[str, Any] = {
  'n': 24,
  'image_size': 32,
  'face_input_size': 16,
  'face_channels': 4,
  'feature_dim': 8,
  'controller_hidden': 4,
  'ctx_embed_dim': 8,
  'ctx_global_dim': 4,
  'head_hidden': 8,
  'batch_size': 8,
  'epochs_ctx': 1,
  'epochs_face': 1,
  'epochs_fusion': 1
}


def pytest_addoption(parser):
  parser.addoption('--run-slow', action='store_true', default=False, help='run full-size acceptance tests')


def pytest_collection_modifyitems(config, items):
  if config.getoption('--run-slow'):
    return
  skip_slow = pytest.mark.skip(reason='needs --run-slow')
  for item in items:
    if 'slow' in item.keywords:
      item.add_marker(skip_slow)


def build_small_config(out: Path, **extra: Any) -> RunConfig:
  return load_run_config(overrides={**SMALL_SETTINGS, 'out': str(out), **extra}, environ={})


def small_cli_args(out: Path, **extra: Any) -> List[str]:
  args = ['--out', str(out)]
  for key, value in {**SMALL_SETTINGS, **extra}.items():
    args.extend(['--set', f'{key}={value}'])
  return args


@pytest.fixture
def make_config() -> Callable[..., RunConfig]:
  return build_small_config


@pytest.fixture
def cli_args() -> Callable[..., List[str]]:
  return small_cli_args


@pytest.fixture
def rng() -> np.random.Generator:
  return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def corpus_dir(tmp_path_factory) -> Path:
  root = tmp_path_factory.mktemp('corpus')
  config = build_small_config(root)
  generate_corpus(config.corpus_spec(), root)
  return root


@pytest.fixture(scope='session')
def trained_run(tmp_path_factory, corpus_dir) -> RunConfig:
  """A complete three-stage run on the small corpus; tests must not write into it."""
  out = tmp_path_factory.mktemp('run')
  config = build_small_config(out, corpus_dir=str(corpus_dir))
  StageRunner(config).run_all()
  return config
