"""Inspection artifacts: gate scores, confidence per source, expert and adaLoG maps.

Tables land in ``<out>/inspect``; per-sample maps in ``<out>/inspect/maps/<id>``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from forgerydet.models.adalog import AdaLoGBlock
from forgerydet.models.face_moe import FaceBranchModel
from forgerydet.pipeline.dataset import PreparedSample
from forgerydet.pipeline.inference import InferenceResult
from forgerydet.reports.generator import pixel_table_rows, save_heatmap, write_table

logger = logging.getLogger(__name__)

FREQUENCY_PREFIX = 'adalog'


@dataclass
class InspectionSummary:
  expert_names: List[str]
  gate_by_source: Dict[str, np.ndarray] = field(default_factory=dict)
  confidence_by_source: Dict[str, np.ndarray] = field(default_factory=dict)
  files: List[Path] = field(default_factory=list)

  def frequency_mass(self, source: str) -> Optional[float]:
    """Mean gate mass on the adaLoG experts of the first MoE layer for ``source``."""
    gates = self.gate_by_source.get(source)
    columns = [i for i, name in enumerate(self.expert_names) if name.startswith(FREQUENCY_PREFIX)]
    if gates is None or not columns or gates.size == 0:
      return None
    return float(gates[:, columns].sum(axis=1).mean())

  def mean_confidence(self, source: str) -> Optional[float]:
    values = self.confidence_by_source.get(source)
    return None if values is None or values.size == 0 else float(values.mean())

  def directional_checks(self) -> Dict[str, Optional[bool]]:
    blend_mass, smooth_mass = self.frequency_mass('blend_partial'), self.frequency_mass('smooth_full')
    blend_c, smooth_c = self.mean_confidence('blend_partial'), self.mean_confidence('smooth_full')
    return {
      'frequency_mass_blend_gt_smooth': None if blend_mass is None or smooth_mass is None else blend_mass > smooth_mass,
      'confidence_smooth_gt_blend': None if blend_c is None or smooth_c is None else smooth_c > blend_c
    }


def _selected_gates(gate_scores: List[List[List[float]]], selected: int) -> List[np.ndarray]:
  per_layer = []
  for layer in gate_scores:
    faces = np.asarray(layer, dtype=np.float64)
    per_layer.append(faces[selected] if selected >= 0 else faces.mean(axis=0))
  return per_layer


def write_score_tables(result: InferenceResult, expert_names: Sequence[str], out_dir: Path) -> InspectionSummary:
  summary = InspectionSummary(expert_names=list(expert_names))
  gate_rows, confidence_rows = [], []
  gates: Dict[str, List[np.ndarray]] = {}
  confidences: Dict[str, List[float]] = {}
  rationales = result.rationales or [''] * len(result.table)
  for row, item, c, rationale in zip(result.table.rows, result.table.prepared, result.confidence, rationales):
    source = item.sample.source
    layers = _selected_gates(row.gate_scores, row.selected_face)
    for index, pi in enumerate(layers):
      gate_rows.append([row.sample_id, source, index] + [float(value) for value in pi])
    if layers:
      gates.setdefault(source, []).append(layers[0])
    confidences.setdefault(source, []).append(float(c))
    confidence_rows.append([row.sample_id, source, float(c), rationale])

  summary.gate_by_source = {source: np.stack(values) for source, values in gates.items()}
  summary.confidence_by_source = {source: np.asarray(values) for source, values in confidences.items()}
  summary.files.append(write_table(out_dir / 'gate_scores.tsv', ['id', 'source', 'layer'] + list(expert_names), gate_rows))
  summary.files.append(write_table(out_dir / 'confidence.tsv', ['id', 'source', 'c', 'rationale'], confidence_rows))

  by_source = []
  for source in sorted(summary.confidence_by_source):
    values = summary.confidence_by_source[source]
    gate_means = summary.gate_by_source[source].mean(axis=0).tolist() if source in summary.gate_by_source else [None] * len(expert_names)
    by_source.append([source, values.size, float(values.mean()), float(values.std()), float(values.min()), float(values.max()),
                      summary.frequency_mass(source)] + gate_means)
  summary.files.append(write_table(
    out_dir / 'by_source.tsv',
    ['source', 'n', 'c_mean', 'c_std', 'c_min', 'c_max', 'frequency_mass'] + [f'pi_{name}' for name in expert_names],
    by_source
  ))
  checks = summary.directional_checks()
  summary.files.append(write_table(out_dir / 'checks.tsv', ['check', 'holds'], sorted(checks.items())))
  logger.info('Directional checks: %s', checks)
  return summary


def write_sample_maps(model: FaceBranchModel, item: PreparedSample, out_dir: Path) -> List[Path]:
  """Expert response heatmaps plus per-scale residual, blend-weight and gate maps for the first crop."""
  target = out_dir / 'maps' / item.sample.id
  crop = item.crop_batch()[:1].astype(model.params.dtype)
  output = model.forward(crop)
  moe_caches = output.cache[4]
  files: List[Path] = []
  for index, (layer, cache) in enumerate(zip(model.moe, moe_caches)):
    for name, expert, response, expert_cache in zip(layer.expert_names, layer.experts, cache.outputs, cache.expert_caches):
      files.append(save_heatmap(np.abs(response[0]).mean(axis=0), target / f'moe{index}_{name}.png'))
      if not isinstance(expert, AdaLoGBlock):
        continue
      _, residuals, blend, gate, _ = expert_cache
      table = []
      for k, residual in enumerate(residuals):
        files.append(save_heatmap(np.abs(residual[0]).mean(axis=0), target / f'moe{index}_{name}_residual{k}.png'))
        files.append(save_heatmap(blend[0, k], target / f'moe{index}_{name}_blend{k}.png', (0.0, 1.0)))
      files.append(save_heatmap(gate[0, 0], target / f'moe{index}_{name}_gate.png', (0.0, 1.0)))
      table.extend(pixel_table_rows('blend', blend[0]))
      table.extend(pixel_table_rows('gate', gate[0]))
      files.append(write_table(target / f'moe{index}_{name}_decision.tsv', ['map', 'pixel', 'channel', 'value'], table))
  return files


def default_map_samples(prepared: Sequence[PreparedSample]) -> List[PreparedSample]:
  """First readable sample of every source, in source order of appearance."""
  chosen: Dict[str, PreparedSample] = {}
  for item in prepared:
    if item.ok and item.sample.source not in chosen:
      chosen[item.sample.source] = item
  return list(chosen.values())
