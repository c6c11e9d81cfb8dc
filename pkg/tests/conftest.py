import matplotlib

matplotlib.use('Agg')

import numpy as np
import pytest
import torch

from scripts.blur_sim import NoiseSpec, TrajectoryKernelSpec, blur, gen_kernel
from scripts.data_loader import Fixture
from scripts.image_core import Image, Kernel


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def make_scene(size=32, seed=0, channels=1):
    """Piecewise-constant scene: a few rectangles and discs on a mid-gray background."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    planes = []
    for _ in range(channels):
        plane = np.full((size, size), 0.5)
        for _ in range(3):
            top, left = rng.integers(0, size // 2, 2)
            h, w = rng.integers(size // 6, size // 2, 2)
            plane[top:top + h, left:left + w] = rng.uniform(0.1, 0.9)
        for _ in range(2):
            cy, cx = rng.uniform(0, size, 2)
            r = rng.uniform(size / 10, size / 4)
            plane[(yy - cy) ** 2 + (xx - cx) ** 2 < r * r] = rng.uniform(0.1, 0.9)
        planes.append(plane)
    return Image(np.stack(planes), tag=f'scene{seed}')


def center_heavy_kernel(size=5, seed=0, weight=0.6):
    """weight * delta + (1 - weight) * random taps; its spectrum stays away from zero."""
    rng = np.random.default_rng(seed)
    taps = (1 - weight) * rng.uniform(size=(size, size))
    taps = taps / taps.sum() * (1 - weight)
    taps[size // 2, size // 2] += weight
    return Kernel.from_taps(taps)


def make_fixtures(count=4, size=32, kernel_size=5, sigma=0.0, seed=0, boundary='replicate_pad_crop', channels=1):
    fixtures = []
    for index in range(count):
        clean = make_scene(size, seed + index, channels)
        kernel = gen_kernel(TrajectoryKernelSpec(size=kernel_size, seed=seed + index))
        blurry = blur(clean, kernel, NoiseSpec(sigma, seed + index), boundary)
        meta = {'index': index, 'seed': seed, 'sigma': repr(sigma), 'kernel_size': kernel_size,
                'name': f'{index:04d}'}
        fixtures.append(Fixture(clean=clean, kernel=kernel, blurry=blurry, meta=meta))
    return fixtures


@pytest.fixture
def scene():
    return make_scene(32, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fixtures():
    return make_fixtures()


@pytest.fixture(autouse=True)
def seeded_torch():
    torch.manual_seed(0)
