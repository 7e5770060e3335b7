"""Report files for evaluation and inspection runs.

All outputs are timestamp-free so repeated runs on equal inputs give equal bytes.
Numbers are written with six decimals; undefined metrics are written as
``undefined`` (TSV) or ``null`` (JSONL).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
from PIL import Image

from forgerydet.metrics.scoring import EvalReport, MetricRow

METRIC_KEYS = ('n', 'positives', 'negatives', 'auc', 'accuracy_opt', 'threshold', 'tpr95', 'tpr99')


def format_value(value: Any) -> str:
  if value is None:
    return 'undefined'
  if isinstance(value, (bool, np.bool_)):
    return 'true' if value else 'false'
  if isinstance(value, (int, np.integer)):
    return str(int(value))
  if isinstance(value, (float, np.floating)):
    if np.isinf(value):
      return '+inf' if value > 0 else '-inf'
    return f'{float(value):.6f}'
  return str(value)


def json_value(value: Any) -> Any:
  if isinstance(value, (float, np.floating)):
    if np.isinf(value):
      return '+inf' if value > 0 else '-inf'
    return round(float(value), 6)
  if isinstance(value, (np.integer,)):
    return int(value)
  if isinstance(value, dict):
    return {key: json_value(item) for key, item in value.items()}
  if isinstance(value, (list, tuple)):
    return [json_value(item) for item in value]
  return value


def write_table(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
  path.parent.mkdir(parents=True, exist_ok=True)
  lines = ['\t'.join(header)]
  lines.extend('\t'.join(format_value(value) for value in row) for row in rows)
  path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
  return path


def write_jsonl(path: Path, records: Iterable[Dict[str, Any]]) -> Path:
  path.parent.mkdir(parents=True, exist_ok=True)
  lines = [json.dumps(json_value(record), sort_keys=False) for record in records]
  path.write_text(''.join(line + '\n' for line in lines), encoding='utf-8')
  return path


@dataclass
class EvalArtifacts:
  table: Path
  jsonl: Path
  roc: Path


def generate_eval_report(report: EvalReport, out_dir: Path, name: str = 'fused') -> EvalArtifacts:
  """``<name>_report.tsv`` (metric × scope), ``<name>_report.jsonl`` and ``<name>_roc.tsv``."""
  scopes: Dict[str, MetricRow] = {'overall': report.overall}
  scopes.update(report.per_source)
  header = ['metric'] + list(scopes)
  rows = [[key] + [getattr(row, key) for row in scopes.values()] for key in METRIC_KEYS]
  table = write_table(out_dir / f'{name}_report.tsv', header, rows)
  records = [{'scope': scope, **asdict(row)} for scope, row in scopes.items()]
  weighted = report.weighted_source_auc()
  if weighted is not None:
    records.append({'scope': 'source_weighted', 'auc': weighted})
  jsonl = write_jsonl(out_dir / f'{name}_report.jsonl', records)
  roc = write_table(out_dir / f'{name}_roc.tsv', ['fpr', 'tpr', 'threshold'], report.roc)
  return EvalArtifacts(table=table, jsonl=jsonl, roc=roc)


def save_heatmap(values: np.ndarray, path: Path, value_range: Optional[Sequence[float]] = None) -> Path:
  """2-D array → 8-bit grayscale PNG, scaled to ``value_range`` or the array's own min/max."""
  array = np.asarray(values, dtype=np.float64)
  low, high = value_range if value_range is not None else (float(array.min()), float(array.max()))
  scale = (array - low) / (high - low) if high > low else np.zeros_like(array)
  path.parent.mkdir(parents=True, exist_ok=True)
  Image.fromarray(np.clip(np.rint(scale * 255.0), 0, 255).astype(np.uint8), mode='L').save(path, format='PNG')
  return path


def pixel_table_rows(name: str, values: np.ndarray) -> List[List[Any]]:
  """C×H×W map → rows (map, pixel index h*W+w, channel, value)."""
  channels, height, width = values.shape
  rows = []
  for channel in range(channels):
    flat = values[channel].reshape(-1)
    rows.extend([name, pixel, channel, float(flat[pixel])] for pixel in range(height * width))
  return rows
