import numpy as np
import pytest
import scipy.ndimage

from scripts.blur_sim import (DatasetSynthesizer, NoiseSpec, TrajectoryKernelSpec, blur, gaussian_kernel,
                              gen_kernel, make_dataset, odd_sizes, perturb_kernel)
from scripts.data_loader import write_image
from scripts.exceptions import InputError, ParameterError
from scripts.filter_bank import apply_bank, builtin_bank
from scripts.image_core import Image, Kernel, convolve, convolve_plane
from tests.conftest import make_scene


@pytest.fixture
def clean_dir(tmp_path):
    folder = tmp_path / 'clean'
    folder.mkdir()
    for seed in range(3):
        write_image(make_scene(48, seed), str(folder / f'img{seed}.png'))
    write_image(make_scene(16, 9), str(folder / 'tiny.png'))
    (folder / 'broken.png').write_bytes(b'not an image')
    return str(folder)


class TestKernels:
    def test_zero_steps_is_delta(self):
        k = gen_kernel(TrajectoryKernelSpec(size=15, steps=0))
        assert k.taps[7, 7] == 1.0
        assert k.taps.sum() == 1.0

    def test_deterministic(self):
        spec = TrajectoryKernelSpec(size=21, seed=42)
        np.testing.assert_array_equal(gen_kernel(spec).taps, gen_kernel(spec).taps)

    def test_different_seeds_differ(self):
        a = gen_kernel(TrajectoryKernelSpec(size=21, seed=1))
        b = gen_kernel(TrajectoryKernelSpec(size=21, seed=2))
        assert not np.array_equal(a.taps, b.taps)

    def test_sweep_valid_and_connected(self):
        rng = np.random.default_rng(0)
        for index in range(1000):
            size = int(rng.choice(odd_sizes(13, 35)))
            k = gen_kernel(TrajectoryKernelSpec(size=size, seed=index))
            assert k.shape == (size, size)
            assert np.all(k.taps >= 0)
            assert k.taps.sum() == pytest.approx(1.0, abs=1e-6)
            _, components = scipy.ndimage.label(k.taps > 0, structure=np.ones((3, 3)))
            assert components == 1

    @pytest.mark.parametrize('size', [2, 1, 103, 14])
    def test_bad_size(self, size):
        with pytest.raises(ParameterError):
            gen_kernel(TrajectoryKernelSpec(size=size))

    def test_gaussian_kernel_symmetric(self):
        k = gaussian_kernel(5, 1.0)
        np.testing.assert_allclose(k.taps, k.taps.T)
        np.testing.assert_allclose(k.taps, k.taps[::-1, ::-1])

    def test_perturb_kernel_stays_valid(self):
        k = gen_kernel(TrajectoryKernelSpec(size=15, seed=3))
        noisy = perturb_kernel(k, 0.05, seed=1)
        assert noisy.taps.sum() == pytest.approx(1.0)
        assert np.all(noisy.taps >= 0)
        assert not np.array_equal(noisy.taps, k.taps)
        np.testing.assert_array_equal(perturb_kernel(k, 0.0).taps, k.taps)


class TestBlur:
    def test_noiseless_identity(self, scene):
        out = blur(scene, Kernel.identity())
        np.testing.assert_array_equal(out.data, scene.data)

    def test_noise_level(self):
        x = Image(np.full((256, 256), 0.5))
        out = blur(x, Kernel.identity(), NoiseSpec(0.05, seed=3))
        assert np.std(out.data - x.data) == pytest.approx(0.05, rel=0.03)

    def test_constant_preserved(self):
        x = Image(np.full((20, 20), 0.6))
        out = blur(x, gen_kernel(TrajectoryKernelSpec(size=9, seed=0)))
        np.testing.assert_allclose(out.data, 0.6, atol=1e-12)

    def test_not_clipped(self):
        x = Image(np.full((32, 32), 0.99))
        out = blur(x, Kernel.identity(), NoiseSpec(0.05, seed=0))
        assert out.data.max() > 1.0

    def test_energy_preserved_circular(self, scene):
        k = gen_kernel(TrajectoryKernelSpec(size=9, seed=5))
        out = blur(scene, k, boundary='circular')
        assert out.data.mean() == pytest.approx(scene.data.mean(), abs=1e-8)

    def test_commutes_with_linear_filter(self, scene):
        k = gen_kernel(TrajectoryKernelSpec(size=7, seed=6))
        f = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
        left = convolve_plane(blur(scene, k, boundary='circular').data[0], f, 'circular')
        right = convolve(Image(convolve_plane(scene.data[0], f, 'circular')), k, 'circular').data[0]
        np.testing.assert_allclose(left, right, atol=1e-8)

    def test_noise_independent_of_features(self):
        x = make_scene(100, 3)
        noise = blur(Image(np.zeros((100, 100))), Kernel.identity(), NoiseSpec(0.05, seed=11))
        bank = builtin_bank('gradient')
        fx = apply_bank(bank, x).planes.ravel()
        fn = apply_bank(bank, noise).planes.ravel()
        assert abs(np.corrcoef(fx, fn)[0, 1]) < 0.05


class TestDataset:
    def test_skips_bad_sources(self, clean_dir):
        synth = DatasetSynthesizer(clean_dir, patch=32, kernel_range=(5, 9))
        assert len(synth.load_sources()) == 3

    def test_deterministic(self, clean_dir):
        a = make_dataset(clean_dir, 4, patch=32, kernel_range=(5, 9), seed=7)
        b = make_dataset(clean_dir, 4, patch=32, kernel_range=(5, 9), seed=7)
        assert [f.meta for f in a] == [f.meta for f in b]
        for fa, fb in zip(a, b):
            np.testing.assert_array_equal(fa.blurry.data, fb.blurry.data)

    def test_threads_match_serial(self, clean_dir):
        serial = make_dataset(clean_dir, 4, patch=32, kernel_range=(5, 9), seed=3, threads=1)
        threaded = make_dataset(clean_dir, 4, patch=32, kernel_range=(5, 9), seed=3, threads=3)
        for a, b in zip(serial, threaded):
            np.testing.assert_array_equal(a.blurry.data, b.blurry.data)

    def test_sigma_range(self, clean_dir):
        fixtures = make_dataset(clean_dir, 6, patch=32, kernel_range=(5, 9), noise_range=(0.01, 0.05))
        assert all(0.01 <= f.sigma <= 0.05 for f in fixtures)
        assert all(int(f.meta['kernel_size']) in (5, 7, 9) for f in fixtures)

    def test_replay_from_meta(self, clean_dir):
        fixtures = make_dataset(clean_dir, 3, patch=32, kernel_range=(5, 9), noise_range=(0.0, 0.05), seed=2)
        for f in fixtures:
            kernel = gen_kernel(TrajectoryKernelSpec(size=int(f.meta['kernel_size']),
                                                     seed=int(f.meta['kernel_seed'])))
            np.testing.assert_array_equal(kernel.taps, f.kernel.taps)
            replay = blur(f.clean, kernel, NoiseSpec(f.sigma, int(f.meta['noise_seed'])), f.meta['boundary'])
            np.testing.assert_allclose(replay.data, f.blurry.data, atol=1e-12)

    def test_no_usable_images(self, tmp_path):
        with pytest.raises(InputError):
            DatasetSynthesizer(str(tmp_path), patch=32).load_sources()

    def test_report(self, clean_dir, capsys):
        synth = DatasetSynthesizer(clean_dir, patch=32, kernel_range=(5, 9))
        synth.make_dataset(2, seed=0)
        synth.generate_report()
        assert 'Fixtures: 2' in capsys.readouterr().out
