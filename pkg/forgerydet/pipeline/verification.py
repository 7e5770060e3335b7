"""Gradient-check targets: each builds a small float64 problem around one trainable
component and compares its backward pass with central finite differences.

Loss for every target is a fixed random projection ``Σ R ⊙ output``. Parameters are
jittered after initialization so that zero-initialized layers (the controller's
output conv, for one) still carry informative gradients. Inputs are stored as
``input.*`` parameters so the input gradient is checked alongside.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from forgerydet.core.errors import InvalidArgumentError
from forgerydet.core.gradcheck import DEFAULT_EPS, DEFAULT_MAX_COORDS, finite_diff_grad, worst_absolute_errors, worst_relative_errors
from forgerydet.core.params import ParameterStore
from forgerydet.models.adalog import FINE_BANK, AdaLoGBlock
from forgerydet.models.ctx_branch import CtxHeads, pool_tokens_backward
from forgerydet.models.face_moe import MoELayer, expert_catalog
from forgerydet.models.fusion import FusionMode, FusionModel

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
JITTER = 0.1


@dataclass
class GradProblem:
  store: ParameterStore
  loss: Callable[[ParameterStore], float]
  analytic: Callable[[ParameterStore], Dict[str, np.ndarray]]
  groups: Dict[str, List[str]]


@dataclass
class GroupResult:
  group: str
  worst: float
  coordinates: int
  passed: bool
  worst_absolute: float = 0.0


@dataclass
class GradcheckReport:
  target: str
  seed: int
  groups: List[GroupResult] = field(default_factory=list)

  @property
  def passed(self) -> bool:
    return all(group.passed for group in self.groups)

  def failing(self) -> List[str]:
    return [group.group for group in self.groups if not group.passed]


def _jitter(store: ParameterStore, rng: np.random.Generator) -> None:
  for name in store.names():
    store[name][...] += rng.normal(0.0, JITTER, size=store[name].shape)


def _collect(store: ParameterStore, prefix: str) -> Dict[str, np.ndarray]:
  return {name: store.grad(name).copy() for name in store.names(prefix)}


def adalog_problem(rng: np.random.Generator) -> List[GradProblem]:
  store = ParameterStore(np.float64)
  block = AdaLoGBlock('adalog', 3, FINE_BANK, hidden=4)
  block.init_params(store, rng)
  _jitter(store, rng)
  store.add('input.x', rng.standard_normal((2, 3, 16, 16)))
  weights = rng.standard_normal((2, 3, 16, 16))

  def loss(params: ParameterStore) -> float:
    z, _ = block.forward(params, params['input.x'])
    return float(np.sum(weights * z))

  def analytic(params: ParameterStore) -> Dict[str, np.ndarray]:
    params.zero_grad()
    _, cache = block.forward(params, params['input.x'])
    dx = block.backward(params, weights, cache)
    return {**_collect(params, 'adalog'), 'input.x': dx}

  return [GradProblem(store, loss, analytic, {'controller': store.names('adalog'), 'input': ['input.x']})]


def moe_problem(rng: np.random.Generator) -> List[GradProblem]:
  store = ParameterStore(np.float64)
  layer = MoELayer('moe', 4, list(expert_catalog().values()), hidden=4)
  layer.init_params(store, rng)
  _jitter(store, rng)
  store.add('input.x', rng.standard_normal((2, 4, 12, 12)))
  weights = rng.standard_normal((2, 4, 12, 12))

  def loss(params: ParameterStore) -> float:
    z, _ = layer.forward(params, params['input.x'])
    return float(np.sum(weights * z))

  def analytic(params: ParameterStore) -> Dict[str, np.ndarray]:
    params.zero_grad()
    _, cache = layer.forward(params, params['input.x'])
    dx = layer.backward(params, weights, cache)
    return {**_collect(params, 'moe'), 'input.x': dx}

  groups = {'gate': store.names(layer.gate_prefix)}
  for name in layer.expert_names:
    groups[name] = store.names(f'moe.{name}')
  groups['input'] = ['input.x']
  return [GradProblem(store, loss, analytic, groups)]


def ctx_heads_problem(rng: np.random.Generator) -> List[GradProblem]:
  store = ParameterStore(np.float64)
  heads = CtxHeads(embed_dim=6, global_dim=4, feature_dim=5, hidden=7, params=store).initialize(rng)
  _jitter(store, rng)
  token_names = ['input.w0', 'input.w1']
  store.add(token_names[0], rng.standard_normal((3, 6)))
  store.add(token_names[1], rng.standard_normal((2, 6)))
  store.add('input.h_s', rng.standard_normal((2, 6)))
  store.add('input.f_clip', rng.standard_normal((2, 4)))
  project_weights = rng.standard_normal((2, 5))
  confidence_weights = rng.standard_normal(2)

  def forward(params: ParameterStore):
    pooled, pool_caches = heads.pool([params[name] for name in token_names])
    f_ctx, project_cache = heads.project_forward(pooled)
    c, confidence_cache = heads.confidence_forward(params['input.h_s'], params['input.f_clip'])
    return f_ctx, c, (pool_caches, project_cache, confidence_cache)

  def loss(params: ParameterStore) -> float:
    f_ctx, c, _ = forward(params)
    return float(np.sum(project_weights * f_ctx) + np.sum(confidence_weights * c))

  def analytic(params: ParameterStore) -> Dict[str, np.ndarray]:
    params.zero_grad()
    _, _, (pool_caches, project_cache, confidence_cache) = forward(params)
    dpooled = heads.project_backward(project_weights, project_cache)
    dh_s, df_clip = heads.confidence_backward(confidence_weights, confidence_cache)
    grads = _collect(params, 'heads')
    for index, name in enumerate(token_names):
      grads[name] = pool_tokens_backward(dpooled[index], pool_caches[index])
    grads['input.h_s'] = dh_s
    grads['input.f_clip'] = df_clip
    return grads

  groups = {
    'projection': store.names('heads.proj'),
    'confidence': store.names('heads.conf'),
    'tokens': token_names,
    'confidence_inputs': ['input.h_s', 'input.f_clip']
  }
  return [GradProblem(store, loss, analytic, groups)]


def fusion_problem(rng: np.random.Generator) -> List[GradProblem]:
  problems = []
  for mode in FusionMode:
    store = ParameterStore(np.float64)
    model = FusionModel(feature_dim=5, hidden=7, mode=mode, params=store).initialize(rng)
    _jitter(store, rng)
    store.add('input.f_face', rng.standard_normal((3, 5)))
    store.add('input.f_ctx', rng.standard_normal((3, 5)))
    store.add('input.c', rng.uniform(0.2, 0.8, size=3))
    weights = rng.standard_normal(3)

    def loss(params: ParameterStore, model=model, weights=weights) -> float:
      logits, _ = model.forward(params['input.f_face'], params['input.f_ctx'], params['input.c'])
      return float(np.sum(weights * logits))

    def analytic(params: ParameterStore, model=model, weights=weights) -> Dict[str, np.ndarray]:
      params.zero_grad()
      _, cache = model.forward(params['input.f_face'], params['input.f_ctx'], params['input.c'])
      df_face, df_ctx, dc = model.backward(weights, cache)
      return {**_collect(params, 'fusion'), 'input.f_face': df_face, 'input.f_ctx': df_ctx, 'input.c': dc}

    groups = {
      f'{mode.value}.head': store.names('fusion'),
      f'{mode.value}.inputs': ['input.f_face', 'input.f_ctx', 'input.c']
    }
    problems.append(GradProblem(store, loss, analytic, groups))
  return problems


TARGETS: Dict[str, Callable[[np.random.Generator], List[GradProblem]]] = {
  'adalog': adalog_problem,
  'moe': moe_problem,
  'ctx_heads': ctx_heads_problem,
  'fusion': fusion_problem
}


def run_gradcheck(
  target: str,
  seed: int = 0,
  tolerance: float = TOLERANCE,
  max_coords: int = DEFAULT_MAX_COORDS,
  eps: float = DEFAULT_EPS
) -> GradcheckReport:
  if target not in TARGETS:
    raise InvalidArgumentError(f'unknown gradcheck target {target!r}; expected one of {sorted(TARGETS)}')
  report = GradcheckReport(target=target, seed=seed)
  for problem in TARGETS[target](np.random.default_rng(seed)):
    analytic = problem.analytic(problem.store)
    for group, names in problem.groups.items():
      gradients = finite_diff_grad(problem.loss, problem.store, eps=eps, names=names, max_coords=max_coords, seed=seed)
      worst = worst_relative_errors(gradients, analytic)
      value = max(worst.values()) if worst else 0.0
      absolute = max(worst_absolute_errors(gradients, analytic).values(), default=0.0)
      coordinates = sum(gradient.indices.size for gradient in gradients.values())
      report.groups.append(GroupResult(
        group=group,
        worst=value,
        coordinates=coordinates,
        passed=value <= tolerance,
        worst_absolute=absolute
      ))
      logger.debug(
        'gradcheck %s/%s: worst %.3e (absolute %.3e) over %d coordinates',
        target, group, value, absolute, coordinates
      )
  return report
