from __future__ import annotations

import json

import pytest

from forgerydet.cli.__main__ import main
from forgerydet.data.manifest import save_image


def _trained_args(trained_run, out, cli_args):
  return cli_args(
    out,
    corpus_dir=trained_run.corpus_dir,
    checkpoint_dir=trained_run.output_dir() / 'checkpoints'
  )


def test_missing_output_directory_is_a_usage_error(capsys):
  assert main(['synth']) == 2
  assert 'output directory' in capsys.readouterr().err


def test_invalid_mix_is_a_validation_error(tmp_path, capsys):
  assert main(['synth', '--out', str(tmp_path), '--mix', 'real:0.9']) == 3
  assert 'mix' in capsys.readouterr().err


def test_unknown_key_is_a_validation_error(tmp_path, capsys):
  assert main(['synth', '--out', str(tmp_path), '--set', 'colour=red']) == 3
  assert 'colour' in capsys.readouterr().err


def test_malformed_set_is_a_usage_error(tmp_path):
  assert main(['synth', '--out', str(tmp_path), '--set', 'colour']) == 2


def test_synth_is_repeatable(tmp_path, cli_args):
  first, second = tmp_path / 'a', tmp_path / 'b'
  assert main(['synth'] + cli_args(first, n=9)) == 0
  assert main(['synth'] + cli_args(second, n=9)) == 0
  assert len((first / 'corpus' / 'manifest.jsonl').read_text(encoding='utf-8').splitlines()) == 9
  files = sorted(p.relative_to(first) for p in (first / 'corpus').rglob('*') if p.is_file())
  assert len(files) == 10
  for relative in files:
    assert (first / relative).read_bytes() == (second / relative).read_bytes()


def test_gradcheck_reports_every_group(capsys):
  assert main(['gradcheck', '--target', 'adalog']) == 0
  lines = capsys.readouterr().out.splitlines()
  assert [line.split('\t')[1] for line in lines] == ['controller', 'input']
  assert all(len(line.split('\t')) == 6 and float(line.split('\t')[3]) < 1e-5 for line in lines)
  assert all(line.endswith('\tok') for line in lines)


def test_infer_without_checkpoints_is_an_io_error(tmp_path, cli_args, capsys):
  assert main(['infer'] + cli_args(tmp_path)) == 4
  assert 'train --stage' in capsys.readouterr().err


def test_eval_reports_are_byte_identical(trained_run, tmp_path, cli_args):
  for name in ('first', 'second'):
    assert main(['eval'] + _trained_args(trained_run, tmp_path / name, cli_args)) == 0
  for report in ('fused_report.tsv', 'fused_report.jsonl', 'fused_roc.tsv', 'face_report.tsv', 'predictions.jsonl'):
    first = (tmp_path / 'first' / 'reports' / report).read_bytes()
    assert first == (tmp_path / 'second' / 'reports' / report).read_bytes()
  header = (tmp_path / 'first' / 'reports' / 'fused_report.tsv').read_text(encoding='utf-8').splitlines()[0]
  assert header.split('\t') == ['metric', 'overall', 'blend_partial', 'smooth_full']


def test_infer_single_image_has_no_label(trained_run, tmp_path, cli_args):
  image = trained_run.corpus_path() / 'images' / 'img_00000.png'
  out = tmp_path / 'single'
  assert main(['infer', '--image', str(image)] + _trained_args(trained_run, out, cli_args)) == 0
  lines = (out / 'reports' / 'predictions.jsonl').read_text(encoding='utf-8').splitlines()
  assert len(lines) == 1
  record = json.loads(lines[0])
  assert record['id'] == 'img_00000'
  assert 'label' not in record and 'source' not in record
  assert record['crop_fallback'] is True
  assert 0.0 < record['y_final'] < 1.0
  assert isinstance(record['rationale'], str)


def test_infer_resizes_odd_sized_images(trained_run, tmp_path, cli_args, rng):
  image = save_image(rng.uniform(size=(37, 45, 3)), tmp_path / 'odd.png')
  out = tmp_path / 'odd'
  assert main(['infer', '--image', str(image)] + _trained_args(trained_run, out, cli_args)) == 0
  (line,) = (out / 'reports' / 'predictions.jsonl').read_text(encoding='utf-8').splitlines()
  record = json.loads(line)
  assert 'error' not in record
  assert 0.0 < record['y_final'] < 1.0
  assert 0.0 < record['c'] < 1.0


def test_train_stage_choice_is_enforced(tmp_path):
  with pytest.raises(SystemExit) as info:
    main(['train', '--stage', 'decoder', '--out', str(tmp_path)])
  assert info.value.code == 2
