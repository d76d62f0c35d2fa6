import json
import os

import numpy as np
import pytest

from core import ValidationError
from main import EXIT_CONTRACT, EXIT_OK, EXIT_VALIDATION, first_masks_from_labels, format_ablation, main
from sequence_io import load_masks


@pytest.fixture(scope='module')
def scene(tmp_path_factory):
    out = tmp_path_factory.mktemp('scene')
    assert main(['synth', '--preset', 'occlusion', '--seed', '0', '--out', str(out)]) == EXIT_OK
    return out


@pytest.fixture
def oracle_env(monkeypatch, scene):
    monkeypatch.setenv('ORACLE_DIR', str(scene))
    monkeypatch.setenv('FLOW_BACKEND', 'oracle')
    monkeypatch.setenv('REFINER_BACKEND', 'oracle')
    monkeypatch.setenv('PROPOSAL_BACKEND', 'ncc')


def run_args(scene, out, *extra):
    return ['run', '--frames', str(scene / 'frames'), '--first-mask', str(scene / 'gt' / '00000.png'),
            '--out', str(out), *extra]


def test_synth_writes_frames_masks_flow_and_spec(scene):
    assert len(os.listdir(scene / 'frames')) == 14
    assert len(os.listdir(scene / 'gt')) == 14
    assert len(os.listdir(scene / 'flow')) == 26
    assert (scene / 'flow' / '00003_00002.vsfl').exists()
    spec = json.loads((scene / 'spec.json').read_text())
    assert spec['seed'] == 0
    assert spec['scene']['num_frames'] == 14


def test_synth_rejects_invalid_scene_file(tmp_path):
    path = tmp_path / 'scene.json'
    path.write_text(json.dumps({'width': 10, 'height': 10, 'num_frames': 1}))
    assert main(['synth', '--spec', str(path), '--out', str(tmp_path / 'out')]) == EXIT_VALIDATION
    path.write_text('{not json')
    assert main(['synth', '--spec', str(path), '--out', str(tmp_path / 'out')]) == EXIT_VALIDATION


def test_run_is_reproducible(monkeypatch, scene, tmp_path):
    monkeypatch.setenv('PATCH_SIZE', '64')
    first, second = tmp_path / 'a', tmp_path / 'b'
    assert main(run_args(scene, first)) == EXIT_OK
    assert main(run_args(scene, second)) == EXIT_OK
    for name in sorted(os.listdir(first / 'masks')):
        assert (first / 'masks' / name).read_bytes() == (second / 'masks' / name).read_bytes()
    assert (first / 'iterations.jsonl').read_text() == (second / 'iterations.jsonl').read_text()
    summary = json.loads((first / 'run.json').read_text())
    assert summary['frames'] == 14 and summary['instances'] == 2
    assert summary['config']['PATCH_SIZE'] == 64
    assert summary['config']['FLOW_BACKEND'] == 'block_matching'


def test_run_with_oracles_writes_iterations_and_dumps(oracle_env, monkeypatch, scene, tmp_path):
    monkeypatch.setenv('DUMP_PROBABILITIES', 'true')
    monkeypatch.setenv('SAVE_OVERLAYS', 'true')
    out = tmp_path / 'run'
    assert main(run_args(scene, out)) == EXIT_OK
    records = [json.loads(line) for line in (out / 'iterations.jsonl').read_text().splitlines()]
    assert records and records[0]['iteration'] == 1 and records[0]['instance'] == 1
    assert set(records[0]) == {'iteration', 'frame', 'instance', 'score', 'box', 'forward', 'backward'}
    assert len(os.listdir(out / 'probabilities')) == 14 * 2
    assert (out / 'probabilities' / '00013_02.vspm').exists()
    assert len(os.listdir(out / 'overlays')) == 14
    assert len(load_masks(str(out / 'masks'))) == 14


def test_config_file_values_win_over_environment(monkeypatch, scene, tmp_path):
    monkeypatch.delenv('ORACLE_DIR', raising=False)
    monkeypatch.setenv('FLOW_BACKEND', 'oracle')
    path = tmp_path / 'run.cfg'
    path.write_text('FLOW_BACKEND = block_matching\nPATCH_SIZE = 64\nREID_ENABLED = false\n')
    out = tmp_path / 'out'
    assert main(run_args(scene, out, '--config', str(path))) == EXIT_OK
    summary = json.loads((out / 'run.json').read_text())
    assert summary['config']['FLOW_BACKEND'] == 'block_matching'
    assert summary['config']['REID_ENABLED'] is False


def test_eval_of_ground_truth_is_perfect(scene, tmp_path, capsys):
    assert main(['eval', '--pred', str(scene / 'gt'), '--gt', str(scene / 'gt'), '--out', str(tmp_path)]) == EXIT_OK
    summary = json.loads((tmp_path / 'evaluation.json').read_text())
    assert summary['J']['mean'] == 1.0
    assert summary['F']['mean'] == 1.0
    assert summary['global_mean'] == 1.0
    assert 'Global Mean' in capsys.readouterr().out
    assert (tmp_path / 'evaluation.txt').exists()


def test_ablate_shows_reid_gain(oracle_env, scene, tmp_path, capsys):
    args = ['ablate', '--frames', str(scene / 'frames'), '--first-mask', str(scene / 'gt' / '00000.png'),
            '--out', str(tmp_path)]
    assert main(args) == EXIT_OK
    result = json.loads((tmp_path / 'ablation.json').read_text())
    assert [row['variant'] for row in result['rows']] == ['propagation only', '+ re-id']
    assert result['reid_delta'] > 0
    assert result['config']['FLOW_BACKEND'] == 'oracle'
    assert 'delta +' in capsys.readouterr().out


def test_missing_frames_directory_exits_with_validation_error(scene, tmp_path):
    args = ['run', '--frames', str(tmp_path / 'absent'), '--first-mask', str(scene / 'gt' / '00000.png'),
            '--out', str(tmp_path / 'out')]
    assert main(args) == EXIT_VALIDATION


def test_corrupt_frame_exits_with_validation_error(scene, tmp_path, caplog):
    frames = tmp_path / 'frames'
    frames.mkdir()
    for name in sorted(os.listdir(scene / 'frames')):
        (frames / name).write_bytes((scene / 'frames' / name).read_bytes())
    (frames / '00004.png').write_bytes(b'\x89PNG truncated')
    args = ['run', '--frames', str(frames), '--first-mask', str(scene / 'gt' / '00000.png'),
            '--out', str(tmp_path / 'out')]
    assert main(args) == EXIT_VALIDATION
    assert '00004.png' in caplog.text


def test_oracle_backend_without_ground_truth_is_rejected(monkeypatch, scene, tmp_path):
    monkeypatch.delenv('ORACLE_DIR', raising=False)
    monkeypatch.setenv('FLOW_BACKEND', 'oracle')
    assert main(run_args(scene, tmp_path / 'out')) == EXIT_VALIDATION


def test_missing_oracle_flow_is_contract_violation(monkeypatch, scene, tmp_path):
    broken = tmp_path / 'broken'
    broken.mkdir()
    (broken / 'gt').symlink_to(scene / 'gt')
    (broken / 'flow').mkdir()
    monkeypatch.setenv('ORACLE_DIR', str(broken))
    monkeypatch.setenv('FLOW_BACKEND', 'oracle')
    monkeypatch.setenv('REFINER_BACKEND', 'identity')
    monkeypatch.setenv('PROPOSAL_BACKEND', 'oracle')
    assert main(run_args(scene, tmp_path / 'out')) == EXIT_CONTRACT


def test_unknown_log_level_exits_with_validation_error(scene, tmp_path):
    assert main(['--log-level', 'LOUD', 'eval', '--pred', str(scene / 'gt'), '--gt', str(scene / 'gt'),
                 '--out', str(tmp_path)]) == EXIT_VALIDATION


def test_first_masks_from_labels():
    labels = np.array([[0, 1], [2, 2]])
    masks = first_masks_from_labels(labels)
    assert len(masks) == 2
    assert masks[1].tolist() == [[0.0, 0.0], [1.0, 1.0]]
    with pytest.raises(ValidationError, match='missing'):
        first_masks_from_labels(np.array([[0, 2]]))
    with pytest.raises(ValidationError):
        first_masks_from_labels(np.zeros((2, 2), dtype=np.int32))


def test_format_ablation_reports_boost_over_first_row():
    table = format_ablation([('propagation only', 0.5, 0.6, 0.55), ('+ re-id', 0.7, 0.8, 0.75)])
    lines = table.splitlines()
    assert lines[1].split()[-1] == '+0.000'
    assert lines[2].split()[-1] == '+0.200'
