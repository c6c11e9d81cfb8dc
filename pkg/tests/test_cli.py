import os

import numpy as np
import pandas as pd
import pytest

import scripts.evaluation
from scripts.cli import build_parser, main, parse_range
from scripts.data_loader import FixtureLoader, read_image, read_kernel, write_image, write_kernel
from scripts.refine import DeblurModel
from scripts.train import RefinerWeights
from scripts.evaluation import Violation
from scripts.wiener_core import wiener_image
from tests.conftest import make_fixtures, make_scene

GOLDEN = os.path.join(os.path.dirname(__file__), 'golden')


def golden_header(name):
    with open(os.path.join(GOLDEN, name)) as f:
        return f.read().strip()


def csv_header(path):
    with open(path) as f:
        return f.readline().strip()


@pytest.fixture
def src_dir(tmp_path):
    src = tmp_path / 'src'
    src.mkdir()
    for seed in range(2):
        write_image(make_scene(48, seed), str(src / f'scene{seed}.png'))
    return src


@pytest.fixture
def fixture_dir(tmp_path):
    path = tmp_path / 'fixtures'
    FixtureLoader().save(str(path), make_fixtures(4, sigma=0.01))
    return path


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / 'small.cfg'
    path.write_text("train.patch=16\ntrain.val_count=1\ntrain.batch=2\nfeatures=4\nrefiner.hidden=4\n")
    return path


@pytest.fixture
def observation(tmp_path):
    fixture = make_fixtures(1, sigma=0.01)[0]
    write_image(fixture.blurry, str(tmp_path / 'y.png'), bits=16)
    write_image(fixture.clean, str(tmp_path / 'gt.png'), bits=16)
    write_kernel(fixture.kernel, str(tmp_path / 'k.txt'))
    return fixture


def test_parse_range():
    assert parse_range('0.01..0.05') == (0.01, 0.05)
    assert parse_range('7') == (7.0, 7.0)
    with pytest.raises(Exception):
        parse_range('5..3')


def test_help_lists_subcommands(capsys):
    assert main(['--help']) == 0
    out = capsys.readouterr().out
    for command in ('synth', 'deblur', 'train', 'eval', 'ablate'):
        assert command in out


def test_parser_requires_subcommand():
    assert main([]) == 2
    assert build_parser().parse_args(['eval']).method is None


class TestSynth:
    def test_missing_src_is_usage_error(self, tmp_path):
        assert main(['synth', '--out', str(tmp_path / 'f')]) == 2

    def test_deterministic(self, tmp_path, src_dir):
        args = ['synth', '--src', str(src_dir), '--count', '3', '--patch', '32', '--kernel', '5..9',
                '--noise', '0..0.02', '--seed', '7']
        assert main(args + ['--out', str(tmp_path / 'a')]) == 0
        assert main(args + ['--out', str(tmp_path / 'b'), '--threads', '2']) == 0
        assert sorted(os.listdir(tmp_path / 'a')) == ['0000', '0001', '0002']
        for name in ('0000', '0001', '0002'):
            for item in ('blurry.png', 'kernel.txt', 'meta'):
                a = (tmp_path / 'a' / name / item).read_bytes()
                assert a == (tmp_path / 'b' / name / item).read_bytes()

    def test_no_usable_images(self, tmp_path):
        (tmp_path / 'empty').mkdir()
        assert main(['synth', '--src', str(tmp_path / 'empty'), '--out', str(tmp_path / 'f')]) == 1


class TestDeblur:
    def test_no_refine_matches_wiener(self, tmp_path, observation):
        out = str(tmp_path / 'out.png')
        code = main(['deblur', '--image', str(tmp_path / 'y.png'), '--kernel', str(tmp_path / 'k.txt'),
                     '--out', out, '--bank', 'intensity', '--no-refine', '--bits', '16'])
        assert code == 0
        expected = np.clip(wiener_image(read_image(str(tmp_path / 'y.png')), observation.kernel).data, 0, 1)
        np.testing.assert_allclose(read_image(out).data, expected, atol=1.5 / 65535)

    def test_ground_truth_metrics(self, tmp_path, observation, capsys):
        code = main(['deblur', '--image', str(tmp_path / 'y.png'), '--kernel', str(tmp_path / 'k.txt'),
                     '--out', str(tmp_path / 'out.png'), '--bank', 'intensity+gradient', '--no-refine',
                     '--gt', str(tmp_path / 'gt.png')])
        assert code == 0
        out = capsys.readouterr().out
        assert 'PSNR:' in out and 'SSIM:' in out

    def test_learned_bank_needs_weights(self, tmp_path, observation):
        code = main(['deblur', '--image', str(tmp_path / 'y.png'), '--kernel', str(tmp_path / 'k.txt'),
                     '--out', str(tmp_path / 'out.png'), '--bank', 'learned', '--no-refine'])
        assert code == 2
        assert not (tmp_path / 'out.png').exists()

    def test_fixed_bank_without_weights_stops_after_wiener(self, tmp_path, observation):
        out = str(tmp_path / 'out.png')
        code = main(['deblur', '--image', str(tmp_path / 'y.png'), '--kernel', str(tmp_path / 'k.txt'),
                     '--out', out, '--bank', 'intensity', '--bits', '16'])
        assert code == 0
        expected = np.clip(wiener_image(read_image(str(tmp_path / 'y.png')), observation.kernel).data, 0, 1)
        np.testing.assert_allclose(read_image(out).data, expected, atol=1.5 / 65535)

    def test_weights_keep_model_settings(self, tmp_path, observation):
        weights = str(tmp_path / 'w.bin')
        RefinerWeights.from_model(DeblurModel(bank='intensity', use_wiener=False, hidden=4)).save(weights)
        out = str(tmp_path / 'out.png')
        code = main(['deblur', '--image', str(tmp_path / 'y.png'), '--kernel', str(tmp_path / 'k.txt'),
                     '--out', out, '--weights', weights, '--bits', '16'])
        assert code == 0
        model = RefinerWeights.load(weights).to_model()
        model.eval()
        y, k = read_image(str(tmp_path / 'y.png')), read_kernel(str(tmp_path / 'k.txt'))
        expected = np.clip(model.deblur(y, k).data, 0, 1)
        np.testing.assert_allclose(read_image(out).data, expected, atol=1.5 / 65535)

    def test_missing_image(self, tmp_path, observation):
        code = main(['deblur', '--image', str(tmp_path / 'nope.png'), '--kernel', str(tmp_path / 'k.txt'),
                     '--out', str(tmp_path / 'out.png'), '--bank', 'intensity', '--no-refine'])
        assert code == 1

    def test_unknown_config_key(self, tmp_path, observation):
        bad = tmp_path / 'bad.cfg'
        bad.write_text("nosuchkey=1\n")
        code = main(['deblur', '--config', str(bad), '--image', str(tmp_path / 'y.png'),
                     '--kernel', str(tmp_path / 'k.txt'), '--out', str(tmp_path / 'out.png'), '--no-refine'])
        assert code == 2


class TestTrainAndEval:
    def test_train_then_deblur_and_eval(self, tmp_path, fixture_dir, small_config, observation):
        weights, log = str(tmp_path / 'w.bin'), str(tmp_path / 'log.csv')
        code = main(['train', '--config', str(small_config), '--fixtures', str(fixture_dir), '--weights', weights,
                     '--log', log, '--bank', 'intensity', '--iterations', '2', '--plot', str(tmp_path / 'loss.png')])
        assert code == 0
        assert os.path.exists(weights)
        assert (tmp_path / 'loss.png').exists()
        assert list(pd.read_csv(log).columns) == ['iteration', 'lr', 'train_loss', 'val_psnr']

        out = str(tmp_path / 'out.png')
        assert main(['deblur', '--image', str(tmp_path / 'y.png'), '--kernel', str(tmp_path / 'k.txt'),
                     '--out', out, '--weights', weights]) == 0
        assert read_image(out).extent == observation.blurry.extent
        assert main(['deblur', '--image', str(tmp_path / 'y.png'), '--kernel', str(tmp_path / 'k.txt'),
                     '--out', out, '--weights', weights, '--bank', 'gradient']) == 2

        csv = str(tmp_path / 'results.csv')
        assert main(['eval', '--fixtures', str(fixture_dir), '--method', 'wiener',
                     '--method', f'model:{weights}', '--out', csv]) == 0
        assert pd.read_csv(csv)['method'].value_counts().to_dict() == {'wiener': 4, f'model:{weights}': 4}

    def test_gamma_must_match_levels(self, tmp_path, fixture_dir):
        code = main(['train', '--fixtures', str(fixture_dir), '--weights', str(tmp_path / 'w.bin'),
                     '--log', str(tmp_path / 'log.csv'), '--bank', 'intensity', '--levels', '3'])
        assert code == 2
        assert not (tmp_path / 'w.bin').exists()

    def test_eval_empty_fixture_set(self, tmp_path):
        (tmp_path / 'empty').mkdir()
        csv = tmp_path / 'results.csv'
        assert main(['eval', '--fixtures', str(tmp_path / 'empty'), '--out', str(csv)]) == 1
        assert not csv.exists()

    def test_eval_requires_ground_truth(self, tmp_path, fixture_dir):
        os.remove(fixture_dir / '0001' / 'clean.png')
        csv = tmp_path / 'results.csv'
        assert main(['eval', '--fixtures', str(fixture_dir), '--out', str(csv)]) == 1
        assert not csv.exists()

    def test_eval_tables_match_golden_headers(self, tmp_path, fixture_dir):
        csv = tmp_path / 'results.csv'
        assert main(['eval', '--fixtures', str(fixture_dir), '--out', str(csv)]) == 0
        summary = tmp_path / 'results_summary.csv'
        assert csv_header(csv) == golden_header('eval_results_header.txt')
        assert csv_header(summary) == golden_header('eval_summary_header.txt')
        rows = pd.read_csv(csv)
        assert rows['kernel_size'].dtype.kind == 'i'
        for frame in (rows, pd.read_csv(summary)):
            assert frame['psnr'].dtype.kind == 'f' and frame['ssim'].dtype.kind == 'f'
            assert frame['psnr'].between(5, 100).all()
            assert frame['ssim'].between(-1, 1).all()
        means = pd.read_csv(summary)
        overall = means[means['noise'].astype(str) == 'all'].set_index('method')['psnr']
        for method, group in rows.groupby('method'):
            assert abs(overall[method] - group['psnr'].mean()) < 1e-9

    def test_color_end_to_end(self, tmp_path, small_config):
        src = tmp_path / 'rgb'
        src.mkdir()
        for seed in range(2):
            write_image(make_scene(48, seed, channels=3), str(src / f'scene{seed}.png'))
        fixtures = tmp_path / 'fixtures'
        assert main(['synth', '--src', str(src), '--out', str(fixtures), '--count', '4', '--patch', '32',
                     '--kernel', '5..7', '--noise', '0.01..0.01']) == 0
        assert FixtureLoader(str(fixtures)).load()[0].clean.channels == 3

        weights = str(tmp_path / 'w.bin')
        assert main(['train', '--config', str(small_config), '--fixtures', str(fixtures), '--weights', weights,
                     '--log', str(tmp_path / 'log.csv'), '--bank', 'intensity+gradient', '--iterations', '1']) == 0
        assert RefinerWeights.load(weights).to_model().channels == 3

        fixture = FixtureLoader(str(fixtures)).load()[0]
        write_image(fixture.blurry, str(tmp_path / 'y.png'), bits=16)
        write_kernel(fixture.kernel, str(tmp_path / 'k.txt'))
        out = str(tmp_path / 'out.png')
        assert main(['deblur', '--image', str(tmp_path / 'y.png'), '--kernel', str(tmp_path / 'k.txt'),
                     '--out', out, '--weights', weights]) == 0
        assert read_image(out).channels == 3

        csv = tmp_path / 'results.csv'
        assert main(['eval', '--fixtures', str(fixtures), '--method', 'wiener',
                     '--method', f'model:{weights}', '--out', str(csv)]) == 0
        assert len(pd.read_csv(csv)) == 8

    def test_eval_report(self, fixture_dir, capsys):
        assert main(['eval', '--fixtures', str(fixture_dir)]) == 0
        assert 'EVALUATION' in capsys.readouterr().out


class TestAblate:
    def run(self, tmp_path, fixture_dir, small_config, *extra):
        return main(['ablate', '--config', str(small_config), '--train-fixtures', str(fixture_dir),
                     '--fixtures', str(fixture_dir), '--banks', 'intensity', '--iterations', '1',
                     '--weights-dir', str(tmp_path / 'arms'), *extra])

    def test_table_and_plot(self, tmp_path, fixture_dir, small_config):
        table, chart = tmp_path / 'ablation.csv', tmp_path / 'arms.png'
        assert self.run(tmp_path, fixture_dir, small_config, '--out', str(table), '--plot', str(chart)) == 0
        assert len(pd.read_csv(table)) == 4
        assert csv_header(table) == golden_header('ablation_header.txt')
        assert chart.exists()

    def test_strict_fails_on_hard_violation(self, tmp_path, fixture_dir, small_config, monkeypatch):
        monkeypatch.setattr(scripts.evaluation, 'check_orderings',
                            lambda table: [Violation('wiener', 'forced', hard=True)])
        assert self.run(tmp_path, fixture_dir, small_config) == 0
        assert self.run(tmp_path, fixture_dir, small_config, '--strict') == 1
