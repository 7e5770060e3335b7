from __future__ import annotations

import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgerydet.core.errors import InvalidArgumentError, UndefinedMetricError
from forgerydet.metrics.scoring import (
  accuracy_at_optimal,
  auc,
  evaluate,
  metric_row,
  roc_points,
  scored_set,
  tpr_at_fpr
)
from forgerydet.reports.generator import generate_eval_report

WORKED_SCORES = [0.1, 0.4, 0.35, 0.8]
WORKED_LABELS = [0, 0, 1, 1]


def pairwise_auc(scores, labels) -> float:
  positives = [s for s, y in zip(scores, labels) if y == 1]
  negatives = [s for s, y in zip(scores, labels) if y == 0]
  wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in positives for n in negatives)
  return wins / (len(positives) * len(negatives))


def brute_accuracy(scores, labels) -> float:
  thresholds = sorted(set(scores)) + [math.inf]
  return max(sum((s >= t) == (y == 1) for s, y in zip(scores, labels)) / len(scores) for t in thresholds)


def test_worked_example():
  scored = scored_set(WORKED_SCORES, WORKED_LABELS)
  assert auc(scored) == 0.75
  accuracy, threshold = accuracy_at_optimal(scored)
  assert accuracy == 0.75
  assert threshold == pytest.approx(0.225)
  assert tpr_at_fpr(scored, 0.05) == 0.5


def test_perfect_and_inverted_rankings():
  assert auc(scored_set([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0
  assert auc(scored_set([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1])) == 0.0
  assert auc(scored_set([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1])) == 0.5


def test_exhaustive_small_sets_match_pairwise_counting():
  grid = (0.2, 0.5, 0.8)
  for n in range(2, 5):
    for scores in itertools.product(grid, repeat=n):
      for labels in itertools.product((0, 1), repeat=n):
        if 0 < sum(labels) < n:
          scored = scored_set(scores, labels)
          assert auc(scored) == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)
          assert accuracy_at_optimal(scored)[0] == pytest.approx(brute_accuracy(scores, labels))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), st.integers(0, 1)), min_size=2, max_size=8))
def test_auc_properties(pairs):
  scores = [s for s, _ in pairs]
  labels = [y for _, y in pairs]
  if not 0 < sum(labels) < len(labels):
    with pytest.raises(UndefinedMetricError):
      auc(scored_set(scores, labels))
    return
  value = auc(scored_set(scores, labels))
  assert value == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)
  flipped = auc(scored_set([-s for s in scores], labels))
  assert value + flipped == pytest.approx(1.0, abs=1e-12)
  shifted = auc(scored_set([3.0 * s + 1.0 for s in scores], labels))
  assert shifted == pytest.approx(value, abs=1e-12)


def test_roc_is_monotone_and_spans_the_unit_square():
  points = roc_points(scored_set(WORKED_SCORES, WORKED_LABELS))
  assert points[0][:2] == (0.0, 0.0)
  assert points[-1][:2] == (1.0, 1.0)
  for (fpr_a, tpr_a, _), (fpr_b, tpr_b, _) in zip(points, points[1:]):
    assert fpr_b >= fpr_a and tpr_b >= tpr_a


def test_single_class_sets():
  scored = scored_set([0.1, 0.9, 0.4], [1, 1, 1])
  with pytest.raises(UndefinedMetricError):
    auc(scored)
  row = metric_row(scored)
  assert row.auc is None and row.tpr95 is None
  assert row.accuracy_opt == 1.0


@pytest.mark.parametrize('scores,labels', [([0.5], [1]), ([0.1, 0.2], [0, 2]), ([0.1, float('nan')], [0, 1]), ([0.1, 0.2, 0.3], [0, 1])])
def test_invalid_scored_sets(scores, labels):
  with pytest.raises(InvalidArgumentError):
    scored_set(scores, labels)


def test_fpr_cap_range():
  scored = scored_set(WORKED_SCORES, WORKED_LABELS)
  with pytest.raises(InvalidArgumentError):
    tpr_at_fpr(scored, 1.0)


def test_overall_auc_is_positive_weighted_mean_of_source_aucs(rng):
  sources = ['real'] * 30 + ['blend_partial'] * 12 + ['smooth_full'] * 18
  labels = [0] * 30 + [1] * 30
  scores = np.round(rng.uniform(size=60), 2)
  report = evaluate(scored_set(scores, labels, sources))
  assert set(report.per_source) == {'blend_partial', 'smooth_full'}
  assert report.per_source['blend_partial'].negatives == 30
  assert report.weighted_source_auc() == pytest.approx(report.auc, abs=1e-12)


def test_report_files(tmp_path):
  scores = WORKED_SCORES + [0.6, 0.05]
  labels = WORKED_LABELS + [1, 0]
  sources = ['real', 'real', 'blend_partial', 'smooth_full', 'smooth_full', 'real']
  artifacts = generate_eval_report(evaluate(scored_set(scores, labels, sources)), tmp_path, name='fused')
  table = artifacts.table.read_text(encoding='utf-8').splitlines()
  assert table[0] == 'metric\toverall\tblend_partial\tsmooth_full'
  assert table[1].startswith('n\t6\t4\t5')
  records = [json.loads(line) for line in artifacts.jsonl.read_text(encoding='utf-8').splitlines()]
  assert [r['scope'] for r in records] == ['overall', 'blend_partial', 'smooth_full', 'source_weighted']
  assert all(len(str(r['auc']).split('.')[-1]) <= 6 for r in records)
  roc = artifacts.roc.read_text(encoding='utf-8').splitlines()
  assert roc[0] == 'fpr\ttpr\tthreshold'
  assert roc[1].endswith('+inf')
