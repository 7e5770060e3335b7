"""Detection metrics: rank AUC, accuracy at the optimal threshold, TPR at capped FPR.

TPR@FPR uses the step ROC (no interpolation). Per-source rows score each forged
source against every real sample, so the overall AUC is the positive-count-weighted
mean of the per-source AUCs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from forgerydet.core.errors import InvalidArgumentError, UndefinedMetricError

TPR95_CAP = 0.05
TPR99_CAP = 0.01


@dataclass
class ScoredSet:
  scores: np.ndarray
  labels: np.ndarray
  sources: Optional[List[str]] = None

  def __post_init__(self) -> None:
    scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(self.labels).reshape(-1)
    if scores.size != labels.size or scores.size < 2:
      raise InvalidArgumentError(f'need equal-length scores and labels with at least 2 entries, got {scores.size} and {labels.size}')
    if not np.all(np.isfinite(scores)):
      raise InvalidArgumentError('scores must be finite')
    if not np.all((labels == 0) | (labels == 1)):
      raise InvalidArgumentError('labels must be 0 or 1')
    if self.sources is not None and len(self.sources) != scores.size:
      raise InvalidArgumentError('sources must align with scores')
    self.scores = scores
    self.labels = labels.astype(np.int64)
    self.sources = list(self.sources) if self.sources is not None else None

  @property
  def positives(self) -> int:
    return int(self.labels.sum())

  @property
  def negatives(self) -> int:
    return int(self.labels.size - self.labels.sum())

  def both_classes(self) -> bool:
    return self.positives > 0 and self.negatives > 0

  def subset(self, mask: np.ndarray) -> 'ScoredSet':
    sources = None if self.sources is None else [s for s, keep in zip(self.sources, mask) if keep]
    return ScoredSet(self.scores[mask], self.labels[mask], sources)


def _require_both(scored: ScoredSet, metric: str) -> None:
  if not scored.both_classes():
    raise UndefinedMetricError(f'{metric} is undefined without both positive and negative samples')


def auc(scored: ScoredSet) -> float:
  """P(random positive outscores random negative), ties credited 0.5."""
  _require_both(scored, 'AUC')
  ranks = rankdata(scored.scores, method='average')
  n_pos, n_neg = scored.positives, scored.negatives
  rank_sum = float(ranks[scored.labels == 1].sum())
  return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
  distinct = np.unique(scores)
  midpoints = (distinct[:-1] + distinct[1:]) / 2.0
  return np.concatenate([[-np.inf], midpoints, [np.inf]])


def accuracy_at_optimal(scored: ScoredSet) -> Tuple[float, float]:
  """Best accuracy predicting forged when score >= t, and the smallest t that reaches it."""
  thresholds = candidate_thresholds(scored.scores)
  predicted = scored.scores[np.newaxis, :] >= thresholds[:, np.newaxis]
  correct = np.sum(predicted == (scored.labels[np.newaxis, :] == 1), axis=1)
  best = int(np.argmax(correct))
  return float(correct[best]) / scored.labels.size, float(thresholds[best])


def roc_points(scored: ScoredSet) -> List[Tuple[float, float, float]]:
  """Step ROC as (fpr, tpr, threshold), from +inf down through every distinct score."""
  _require_both(scored, 'ROC')
  thresholds = np.concatenate([[np.inf], np.unique(scored.scores)[::-1]])
  positive = scored.labels == 1
  points = []
  for threshold in thresholds:
    predicted = scored.scores >= threshold
    tpr = int(np.sum(predicted & positive)) / scored.positives
    fpr = int(np.sum(predicted & ~positive)) / scored.negatives
    points.append((fpr, tpr, float(threshold)))
  return points


def tpr_at_fpr(scored: ScoredSet, fpr_cap: float) -> float:
  if not 0.0 <= fpr_cap < 1.0:
    raise InvalidArgumentError(f'fpr_cap must lie in [0, 1), got {fpr_cap}')
  return max(tpr for fpr, tpr, _ in roc_points(scored) if fpr <= fpr_cap)


@dataclass
class MetricRow:
  n: int
  positives: int
  negatives: int
  auc: Optional[float]
  accuracy_opt: float
  threshold: float
  tpr95: Optional[float]
  tpr99: Optional[float]

  @property
  def defined(self) -> bool:
    return self.auc is not None


@dataclass
class EvalReport:
  overall: MetricRow
  per_source: Dict[str, MetricRow] = field(default_factory=dict)
  roc: List[Tuple[float, float, float]] = field(default_factory=list)

  @property
  def auc(self) -> Optional[float]:
    return self.overall.auc

  def weighted_source_auc(self) -> Optional[float]:
    rows = [row for row in self.per_source.values() if row.auc is not None]
    total = sum(row.positives for row in rows)
    if not rows or total == 0:
      return None
    return math.fsum(row.auc * row.positives for row in rows) / total


def metric_row(scored: ScoredSet) -> MetricRow:
  accuracy, threshold = accuracy_at_optimal(scored)
  defined = scored.both_classes()
  return MetricRow(
    n=int(scored.labels.size),
    positives=scored.positives,
    negatives=scored.negatives,
    auc=auc(scored) if defined else None,
    accuracy_opt=accuracy,
    threshold=threshold,
    tpr95=tpr_at_fpr(scored, TPR95_CAP) if defined else None,
    tpr99=tpr_at_fpr(scored, TPR99_CAP) if defined else None
  )


def evaluate(scored: ScoredSet) -> EvalReport:
  report = EvalReport(overall=metric_row(scored), roc=roc_points(scored) if scored.both_classes() else [])
  if scored.sources is None:
    return report
  negatives = scored.labels == 0
  forged_sources = sorted({s for s, label in zip(scored.sources, scored.labels) if label == 1})
  for source in forged_sources:
    mask = negatives | np.array([s == source and label == 1 for s, label in zip(scored.sources, scored.labels)])
    if mask.sum() >= 2:
      report.per_source[source] = metric_row(scored.subset(mask))
  return report


def scored_set(scores: Sequence[float], labels: Sequence[int], sources: Optional[Sequence[str]] = None) -> ScoredSet:
  return ScoredSet(np.asarray(scores, dtype=np.float64), np.asarray(labels), None if sources is None else list(sources))
