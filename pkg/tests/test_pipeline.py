from __future__ import annotations

import numpy as np
import pytest

from forgerydet.core.errors import CheckpointFormatError, SampleFailureError
from forgerydet.data.manifest import filter_split, read_manifest
from forgerydet.models.ctx_backends import MockContextBackend
from forgerydet.models.ctx_branch import MAX_TOKENS, SENTINEL, VOCABULARY, confidence
from forgerydet.pipeline.bundle import load_detector
from forgerydet.pipeline.dataset import prepare_sample
from forgerydet.pipeline.features import aggregate_faces
from forgerydet.pipeline.inference import decode_rationales, load_inputs, run_inference
from forgerydet.pipeline.inspection import default_map_samples, write_sample_maps, write_score_tables


@pytest.fixture
def bundle(trained_run):
  return load_detector(trained_run)


@pytest.fixture
def test_inputs(trained_run):
  return load_inputs(trained_run, split='test')


def test_aggregation_rules():
  scores = np.array([0.2, 0.9, 0.4])
  features = np.arange(6.0).reshape(3, 2)
  score, feature, index = aggregate_faces(scores, features, 'max')
  assert (score, index) == (0.9, 1)
  np.testing.assert_array_equal(feature, [2.0, 3.0])
  score, feature, index = aggregate_faces(scores, features, 'mean')
  assert score == pytest.approx(0.5)
  assert index == -1
  np.testing.assert_allclose(feature, [2.0, 3.0])


def test_records_follow_input_order(bundle, test_inputs):
  result = run_inference(bundle, test_inputs)
  assert [r['id'] for r in result.records] == [item.sample.id for item in test_inputs]
  assert len(result.records) == 4
  for record in result.records:
    assert 0.0 < record['y_final'] < 1.0
    assert 0.0 < record['c'] < 1.0
    assert record['face_score'] == max(record['face_scores'])
    assert record['source'] in ('real', 'blend_partial', 'smooth_full')
    assert not record['crop_fallback']


def test_records_carry_decoded_rationales(bundle, test_inputs):
  result = run_inference(bundle, test_inputs)
  assert bundle.backend.name == 'toy'
  for record in result.records:
    words = record['rationale'].split()
    assert len(words) <= MAX_TOKENS - 1
    assert all(word in VOCABULARY and word != SENTINEL for word in words)
  assert result.rationales == [record['rationale'] for record in result.records]
  assert decode_rationales(MockContextBackend(), result.table) is None


def test_record_confidence_matches_confidence_head(bundle, test_inputs):
  result = run_inference(bundle, test_inputs)
  for row, record in zip(result.table.rows, result.records):
    expected = confidence(row.context.sentinel_state, row.context.global_visual, bundle.heads)
    assert record['c'] == pytest.approx(expected, abs=1e-6)


def test_zeroed_fusion_head_gives_even_odds(bundle, test_inputs):
  bundle.fusion.head.zero_output(bundle.fusion.params)
  result = run_inference(bundle, test_inputs)
  assert all(record['y_final'] == 0.5 for record in result.records)


def test_duplicate_inputs_get_equal_records(bundle, test_inputs):
  result = run_inference(bundle, [test_inputs[0], test_inputs[1], test_inputs[0]])
  first, _, again = result.records
  assert first['id'] == again['id']
  assert again['y_final'] == pytest.approx(first['y_final'])
  assert again['c'] == pytest.approx(first['c'])
  assert again['face_scores'] == pytest.approx(first['face_scores'])


def test_unreadable_sample_yields_error_record(bundle, trained_run, test_inputs, tmp_path):
  sample = filter_split(read_manifest(trained_run.manifest_path()), 'test')[0]
  broken = tmp_path / 'broken.png'
  broken.write_bytes(b'not a png')
  sample.path = str(broken)
  failed = prepare_sample(sample, tmp_path, trained_run)
  assert not failed.ok
  result = run_inference(bundle, [failed] + test_inputs[1:])
  assert set(result.records[0]) == {'id', 'error'}
  assert result.failures == 1
  assert all('y_final' in record for record in result.records[1:])
  with pytest.raises(SampleFailureError):
    run_inference(bundle, [failed])


def test_fused_and_face_sets_carry_sources(bundle, test_inputs):
  result = run_inference(bundle, test_inputs)
  fused = result.fused_set()
  assert fused.positives == 2 and fused.negatives == 2
  assert sorted(set(fused.sources)) == ['blend_partial', 'real', 'smooth_full']
  np.testing.assert_allclose(result.face_set().scores, [r['face_score'] for r in result.records])


def test_missing_fusion_checkpoint(trained_run, make_config, tmp_path):
  config = make_config(tmp_path, corpus_dir=trained_run.corpus_dir)
  with pytest.raises(CheckpointFormatError) as info:
    load_detector(config)
  assert info.value.field == 'path'


def test_architecture_mismatch_is_rejected(trained_run, make_config, tmp_path):
  config = make_config(
    tmp_path,
    corpus_dir=trained_run.corpus_dir,
    checkpoint_dir=str(trained_run.output_dir() / 'checkpoints'),
    face_channels=6
  )
  with pytest.raises(CheckpointFormatError) as info:
    load_detector(config)
  assert info.value.field == 'entries'


def test_inspection_tables(bundle, test_inputs, tmp_path):
  result = run_inference(bundle, test_inputs)
  names = bundle.face.moe[0].expert_names
  summary = write_score_tables(result, names, tmp_path)
  lines = (tmp_path / 'gate_scores.tsv').read_text(encoding='utf-8').splitlines()
  assert lines[0].split('\t') == ['id', 'source', 'layer'] + names
  for line in lines[1:]:
    assert sum(float(value) for value in line.split('\t')[3:]) == pytest.approx(1.0, abs=1e-5)
  for values in summary.confidence_by_source.values():
    assert np.all((values > 0.0) & (values < 1.0))
  checks = summary.directional_checks()
  assert set(checks) == {'frequency_mass_blend_gt_smooth', 'confidence_smooth_gt_blend'}
  assert all(isinstance(value, bool) for value in checks.values())
  assert (tmp_path / 'checks.tsv').is_file()
  rows = [line.split('\t') for line in (tmp_path / 'confidence.tsv').read_text(encoding='utf-8').splitlines()]
  assert rows[0] == ['id', 'source', 'c', 'rationale']
  assert [row[3] for row in rows[1:]] == result.rationales


def test_sample_maps(bundle, test_inputs, tmp_path):
  chosen = default_map_samples(test_inputs)
  assert len({item.sample.source for item in chosen}) == len(chosen) == 3
  files = write_sample_maps(bundle.face, chosen[0], tmp_path)
  names = {path.name for path in files}
  assert 'moe0_rgb3.png' in names
  assert 'moe0_adalog_fine_gate.png' in names
  assert 'moe0_adalog_coarse_residual2.png' in names
  decision = tmp_path / 'maps' / chosen[0].sample.id / 'moe0_adalog_fine_decision.tsv'
  rows = decision.read_text(encoding='utf-8').splitlines()
  assert len(rows) == 1 + 4 * 8 * 8
