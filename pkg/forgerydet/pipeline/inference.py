from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from forgerydet.config import RunConfig
from forgerydet.core import layers
from forgerydet.data.manifest import Sample, filter_split, read_manifest
from forgerydet.logging.event_logger import EventLogger
from forgerydet.models.ctx_backends import ContextBackend
from forgerydet.metrics.scoring import ScoredSet, scored_set
from forgerydet.pipeline.bundle import DetectorBundle
from forgerydet.pipeline.dataset import PreparedSample, prepare_samples, stack_images
from forgerydet.pipeline.features import FeatureTable, extract_features, fusion_forward, require_rows

logger = logging.getLogger(__name__)


@dataclass
class InferenceResult:
  records: List[Dict[str, Any]] = field(default_factory=list)
  table: FeatureTable = field(default_factory=FeatureTable)
  fused: np.ndarray = field(default_factory=lambda: np.zeros(0))
  confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))
  rationales: Optional[List[str]] = None

  @property
  def failures(self) -> int:
    return len(self.table.errors)

  def fused_set(self) -> ScoredSet:
    return scored_set(self.fused, self.table.labels(), self.table.sources())

  def face_set(self) -> ScoredSet:
    return scored_set(self.table.face_scores(), self.table.labels(), self.table.sources())


def image_sample(path: Path) -> Sample:
  """Ad-hoc sample for a bare image path; label and source are placeholders, never scored."""
  return Sample(id=path.stem, path=str(path.resolve()), label=0, source='real', width=1, height=1)


def load_inputs(config: RunConfig, image: Optional[str] = None, split: Optional[str] = None) -> List[PreparedSample]:
  if image is not None:
    path = Path(image)
    return prepare_samples([image_sample(path)], path.parent, config)
  manifest = config.manifest_path()
  if not manifest.is_file():
    raise FileNotFoundError(f'manifest not found: {manifest}')
  return prepare_samples(filter_split(read_manifest(manifest), split), manifest.parent, config)


def decode_rationales(backend: ContextBackend, table: FeatureTable) -> Optional[List[str]]:
  """Generated rationale text per scored row, for backends with a decoder."""
  generate = getattr(backend, 'rationales', None)
  if generate is None or not table.rows:
    return None
  return [sequence.text for sequence in generate(stack_images(table.prepared))]


def run_inference(
  bundle: DetectorBundle,
  prepared: Sequence[PreparedSample],
  labeled: bool = True,
  events: Optional[EventLogger] = None
) -> InferenceResult:
  """crop → face branch → aggregate → context encoder → projection + confidence → fusion.

  One record per input in input order; failed samples yield ``{"id", "error"}``
  records. Fails only when no sample could be scored.
  """
  config = bundle.config
  table = extract_features(bundle.face, bundle.backend, prepared, config.face_aggregation)
  if events is not None:
    for error in table.errors:
      events.log_error(f'sample {error["id"]} failed', error)
  require_rows(table, 'inference')
  logits, c, _ = fusion_forward(bundle.heads, bundle.fusion, table, range(len(table)))
  fused = layers.sigmoid(logits.astype(np.float64))
  c = c.astype(np.float64)
  rationales = decode_rationales(bundle.backend, table)

  scored: Dict[int, Dict[str, Any]] = {}
  for position, (row, item) in enumerate(zip(table.rows, table.prepared)):
    record: Dict[str, Any] = {'id': row.sample_id}
    if labeled:
      record.update(label=item.sample.label, source=item.sample.source)
    record.update(
      y_final=float(fused[position]),
      c=float(c[position]),
      face_score=row.face_score,
      face_scores=row.face_scores,
      selected_face=row.selected_face,
      gate_scores=row.gate_scores,
      crop_fallback=any(crop.fallback for crop in item.crops)
    )
    if rationales is not None:
      record['rationale'] = rationales[position]
    scored[id(item)] = record
  errors = {error['id']: error for error in table.errors}
  records = []
  for item in prepared:
    if id(item) in scored:
      records.append(scored[id(item)])
    else:
      records.append({'id': item.sample.id, 'error': errors.get(item.sample.id, {}).get('error', 'failed')})
  logger.info('Scored %d samples (%d failed)', len(table), len(table.errors))
  return InferenceResult(records=records, table=table, fused=fused, confidence=c, rationales=rationales)
