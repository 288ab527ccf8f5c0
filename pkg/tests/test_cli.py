import csv

import numpy as np
import pytest

import geocomplete
from errors import EXIT_CONFIG, EXIT_IO, EXIT_OK, ConfigurationError
from geometry import load_point_cloud
from scene_forge import load_scene

SMALL_CONFIG = """\
[model]
hidden = 16
blocks = 1
heads = 2
timesteps = 10

[train]
iterations = 2
batch_size = 2

[infer]
steps = 2
"""


@pytest.fixture
def scene_dir(tmp_path):
    out = tmp_path / 'scene'
    assert geocomplete.main(['--seed', '7', 'gen', '--preset', 'tiny', '-o', str(out)]) == EXIT_OK
    return out


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / 'small.ini'
    path.write_text(SMALL_CONFIG)
    return path


def test_gen_writes_loadable_scene(scene_dir):
    scene = load_scene(scene_dir)
    assert scene.seed == 7
    assert scene.shape == (32, 32)


def test_gen_is_reproducible(tmp_path, scene_dir):
    again = tmp_path / 'again'
    assert geocomplete.main(['--seed', '7', 'gen', '--preset', 'tiny', '-o', str(again)]) == EXIT_OK
    names = sorted(p.name for p in scene_dir.iterdir())
    assert names == sorted(p.name for p in again.iterdir())
    for name in names:
        assert (scene_dir / name).read_bytes() == (again / name).read_bytes(), name


def test_invalid_preset_is_rejected(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        geocomplete.main(['gen', '--preset', 'nope', '-o', str(tmp_path)])
    assert info.value.code == EXIT_CONFIG
    assert 'planar3' in capsys.readouterr().err


def test_invalid_preset_in_config(tmp_path, capsys):
    path = tmp_path / 'c.ini'
    path.write_text("[scene]\npreset = nope\n")
    assert geocomplete.main(['--config', str(path), 'gen', '-o', str(tmp_path / 'out')]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert 'config error:' in err
    assert 'planar3' in err


def test_missing_config_file(tmp_path):
    assert geocomplete.main(['--config', str(tmp_path / 'none.ini'), 'gen', '-o', str(tmp_path)]) == EXIT_IO


def test_project_writes_diagnostics(tmp_path, scene_dir):
    out = tmp_path / 'proj'
    assert geocomplete.main(['project', '--scene', str(scene_dir), '-o', str(out)]) == EXIT_OK
    for name in ('target_cloud.png', 'target_coverage.png', 'ref_0_cloud.png', 'ref_1_informative.png', 'copy_cloud_baseline.png'):
        assert (out / name).is_file(), name


def test_malformed_scene_exits_with_io_code(tmp_path, scene_dir, capsys):
    (scene_dir / 'target.cam').write_text("garbage")
    assert geocomplete.main(['project', '--scene', str(scene_dir), '-o', str(tmp_path / 'p')]) == EXIT_IO
    assert 'io error:' in capsys.readouterr().err


def test_mask_debug(tmp_path, scene_dir):
    out = tmp_path / 'dbg'
    assert geocomplete.main(['mask-debug', '--scene', str(scene_dir), '--view', '1', '-o', str(out)]) == EXIT_OK
    assert (out / 'ref_1_cond_image.png').is_file()
    assert (out / 'ref_1_informative.png').is_file()
    assert (out / 'target_weight.png').is_file()
    assert geocomplete.main(['mask-debug', '--scene', str(scene_dir), '--view', '5', '-o', str(out)]) == EXIT_CONFIG


def test_eval_ground_truth_against_itself(tmp_path, scene_dir, capsys):
    out = tmp_path / 'eval'
    code = geocomplete.main(['eval', '--scene', str(scene_dir), '--image', str(scene_dir / 'target_gt.png'), '-o', str(out)])
    assert code == EXIT_OK
    printed = capsys.readouterr().out
    assert 'PSNR masked: 99.000 dB' in printed
    assert 'SSIM full:   1.0000' in printed
    assert (out / 'eval.csv').read_text().splitlines()[1].split(',')[3] == '99.0'


def test_train_then_infer(tmp_path, scene_dir, small_config):
    run = tmp_path / 'run'
    assert geocomplete.main(['--config', str(small_config), 'train', '--scene', str(scene_dir), '-o', str(run)]) == EXIT_OK
    assert (run / 'checkpoint.gckp').is_file()
    assert (run / 'loss.csv').is_file()
    assert '[train]' in (run / 'geocomplete.ini').read_text()

    done = tmp_path / 'done'
    args = ['--config', str(small_config), 'infer', '--scene', str(scene_dir), '--checkpoint', str(run / 'checkpoint.gckp'), '-o', str(done)]
    assert geocomplete.main(args) == EXIT_OK
    assert (done / 'completion.png').is_file()


def test_infer_with_mismatched_checkpoint(tmp_path, scene_dir, small_config, capsys):
    run = tmp_path / 'run'
    assert geocomplete.main(['--config', str(small_config), 'train', '--scene', str(scene_dir), '-o', str(run)]) == EXIT_OK
    other = tmp_path / 'other.ini'
    other.write_text(SMALL_CONFIG.replace('hidden = 16', 'hidden = 32'))
    args = ['--config', str(other), 'infer', '--scene', str(scene_dir), '--checkpoint', str(run / 'checkpoint.gckp'), '-o', str(tmp_path / 'x')]
    assert geocomplete.main(args) == EXIT_CONFIG
    assert 'hidden' in capsys.readouterr().err


def test_robust_writes_one_row_per_cell(tmp_path, scene_dir, small_config):
    out = tmp_path / 'robust'
    args = ['--config', str(small_config), 'robust', '--scene', str(scene_dir), '--kind', 'sparse', '--levels', '0,0.5', '-o', str(out)]
    assert geocomplete.main(args) == EXIT_OK
    with open(out / 'robustness.csv') as f:
        rows = list(csv.reader(f))
    assert len(rows) == 1 + 2
    assert [row[1] for row in rows[1:]] == ['0.0', '0.5']


def test_ablate(tmp_path, scene_dir, small_config, capsys):
    out = tmp_path / 'ablate'
    args = ['--config', str(small_config), 'ablate', '--scene', str(scene_dir), '--variants', 'no_cloud,full', '--seeds', '0', '-o', str(out)]
    assert geocomplete.main(args) == EXIT_OK
    with open(out / 'ablation.csv') as f:
        rows = list(csv.reader(f))
    assert [row[0] for row in rows[1:]] == ['no_cloud', 'full']
    assert 'no_cloud' in capsys.readouterr().out


def test_config_booleans_and_types(tmp_path):
    path = tmp_path / 'c.ini'
    path.write_text("[masking]\ntarget_aware = 0\nv_fill = 0.5\n[model]\nblocks = 1\n")
    geocomplete.config_load(str(path))
    cfg = geocomplete.masking_config()
    assert cfg.target_aware is False
    assert cfg.v_fill == 0.5
    assert geocomplete.config_get('model', 'blocks', 4) == 1
    assert geocomplete.config_get('model', 'heads', 4) == 4
    # missing keys are filled in with their defaults
    assert geocomplete.config.get('model', 'heads') == '4'

    path.write_text("[masking]\ntarget_aware = yes\n")
    geocomplete.config_load(str(path))
    with pytest.raises(ConfigurationError):
        geocomplete.masking_config()


def test_value_conversions():
    assert geocomplete.parse_value_from_config('1') is True
    assert geocomplete.parse_value_from_config('0') is False
    assert geocomplete.parse_value_from_config('0.5') == '0.5'
    assert geocomplete.parse_value_to_config(True) == '1'
    assert geocomplete.parse_value_to_config(np.float64(0.25)) == '0.25'


@pytest.mark.parametrize('argv', [
    ['gen', '--preset', 'tiny', '--seed', '7'],
    ['gen', '--seed', '7', '--threads', '1', '--preset', 'tiny'],
    ['gen', '-v', '--preset', 'tiny', '--seed', '7'],
])
def test_global_options_after_the_subcommand(tmp_path, argv):
    out = tmp_path / 'scene'
    assert geocomplete.main(argv + ['-o', str(out)]) == EXIT_OK
    assert load_scene(out).seed == 7


def test_seed_given_first_survives_the_subcommand(tmp_path):
    out = tmp_path / 'scene'
    assert geocomplete.main(['--seed', '5', 'gen', '--preset', 'tiny', '-o', str(out)]) == EXIT_OK
    assert load_scene(out).seed == 5


def test_project_exports_and_reprojects_the_scene_cloud(tmp_path, scene_dir, capsys):
    out = tmp_path / 'proj'
    assert geocomplete.main(['project', '--scene', str(scene_dir), '-o', str(out)]) == EXIT_OK
    exported = out / 'scene_cloud.gpcd'
    assert len(load_point_cloud(exported)) > 0
    assert 'points' in capsys.readouterr().out

    again = tmp_path / 'again'
    assert geocomplete.main(['project', '--scene', str(scene_dir), '--cloud', str(exported), '-o', str(again)]) == EXIT_OK
    assert (again / 'external_cloud.png').is_file()
    assert (again / 'external_coverage.png').is_file()


def test_project_with_missing_cloud_file(tmp_path, scene_dir):
    args = ['project', '--scene', str(scene_dir), '--cloud', str(tmp_path / 'none.gpcd'), '-o', str(tmp_path / 'p')]
    assert geocomplete.main(args) == EXIT_IO
