"""Synthesize blurry observations y = x * k + n and build fixture sets."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.ndimage
from tqdm import tqdm

from scripts.data_loader import Fixture, list_images, read_image
from scripts.exceptions import FormatError, InputError, ParameterError
from scripts.image_core import Image, Kernel, convolve

logger = logging.getLogger(__name__)

MIN_KERNEL = 3
MAX_KERNEL = 101


@dataclass(frozen=True)
class NoiseSpec:
    """Additive i.i.d. Gaussian noise, sigma as a fraction of peak."""

    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ParameterError(f"Noise sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class TrajectoryKernelSpec:
    """Random camera-shake trajectory rasterized into a size x size PSF."""

    size: int = 15
    steps: int = 64
    anxiety: float = 0.3
    seed: int = 0
    smooth: float = 0.3


def gaussian_kernel(size, sigma):
    """Isotropic Gaussian PSF."""
    if size % 2 == 0 or size < 1:
        raise ParameterError(f"Kernel size must be odd and positive, got {size}")
    ax = np.arange(size) - size // 2
    xx, yy = np.meshgrid(ax, ax)
    return Kernel.from_taps(np.exp(-(xx ** 2 + yy ** 2) / (2.0 * sigma ** 2)))


def _splat(points, size):
    """Bilinear splatting of sub-pixel points onto a size x size grid."""
    taps = np.zeros((size, size))
    y, x = points[:, 0], points[:, 1]
    y0, x0 = np.floor(y).astype(int), np.floor(x).astype(int)
    fy, fx = y - y0, x - x0
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            np.add.at(taps, (y0 + dy, x0 + dx), wy * wx)
    return taps


def gen_kernel(spec):
    """Random-trajectory motion PSF: a Gaussian-perturbed direction walk, densely sampled,
    splatted bilinearly and optionally smoothed. Deterministic for a fixed seed."""
    size = spec.size
    if size % 2 == 0 or not MIN_KERNEL <= size <= MAX_KERNEL:
        raise ParameterError(f"Kernel size must be odd in [{MIN_KERNEL}, {MAX_KERNEL}], got {size}")
    if spec.steps < 0:
        raise ParameterError(f"steps must be >= 0, got {spec.steps}")
    if spec.steps == 0:
        taps = np.zeros((size, size))
        taps[size // 2, size // 2] = 1.0
        return Kernel(taps)

    rng = np.random.default_rng(spec.seed)
    angles = rng.uniform(0, 2 * np.pi) + np.cumsum(spec.anxiety * rng.standard_normal(spec.steps))
    steps = np.stack([np.sin(angles), np.cos(angles)], axis=1)
    path = np.vstack([np.zeros((1, 2)), np.cumsum(steps, axis=0)])

    # scale the path so its bounding box spans a random share of the usable support
    span = np.ptp(path, axis=0).max()
    target = rng.uniform(0.5, 1.0) * (size - 3)
    path = path * (target / span if span > 0 else 0.0)
    path = path - (path.min(axis=0) + path.max(axis=0)) / 2 + (size - 1) / 2

    # at least four samples per pixel of travel keeps the support connected
    per_step = max(2, int(np.ceil(4 * target / spec.steps)) + 1)
    t = np.linspace(0.0, 1.0, per_step, endpoint=False)
    dense = (path[:-1, None, :] + t[None, :, None] * np.diff(path, axis=0)[:, None, :]).reshape(-1, 2)
    dense = np.vstack([dense, path[-1:]])

    taps = _splat(dense, size)
    if spec.smooth > 0:
        taps = scipy.ndimage.gaussian_filter(taps, spec.smooth, mode='constant')
    return Kernel.from_taps(taps)


def perturb_kernel(k, rel_sigma, seed=0):
    """Relative Gaussian tap noise, clamped at zero and renormalized (inaccurate-kernel model)."""
    if rel_sigma < 0:
        raise ParameterError(f"rel_sigma must be >= 0, got {rel_sigma}")
    rng = np.random.default_rng(seed)
    taps = k.taps * (1.0 + rel_sigma * rng.standard_normal(k.shape))
    return Kernel.from_taps(np.clip(taps, 0.0, None))


def blur(x, k, noise=NoiseSpec(), boundary='replicate_pad_crop'):
    """y = x * k + n; no clipping to [0, 1]."""
    y = convolve(x, k, boundary)
    if noise.sigma == 0:
        return y
    rng = np.random.default_rng(noise.seed)
    return Image(y.data + noise.sigma * rng.standard_normal(y.data.shape), tag=x.tag)


def odd_sizes(low, high):
    sizes = [s for s in range(low, high + 1) if s % 2 == 1]
    if not sizes:
        raise ParameterError(f"No odd kernel size in [{low}, {high}]")
    return sizes


class DatasetSynthesizer:
    """Builds (clean, kernel, blurry, meta) fixtures from a directory of clean images.

    Every fixture draws from its own generator seeded by (seed, index), so serial and
    threaded runs produce the same set.
    """

    def __init__(self, clean_dir, patch=64, kernel_range=(13, 27), noise_range=(0.0, 0.05),
                 boundary='replicate_pad_crop', steps=64, anxiety=0.3, smooth=0.3, threads=1):
        self.clean_dir = clean_dir
        self.patch = patch
        self.kernel_sizes = odd_sizes(*kernel_range)
        self.noise_range = noise_range
        self.boundary = boundary
        self.steps = steps
        self.anxiety = anxiety
        self.smooth = smooth
        self.threads = max(1, threads)
        self.sources = []
        self.stats = {}

    def load_sources(self):
        """Read source images, skipping unreadable or undersized ones."""
        self.sources = []
        for path in list_images(self.clean_dir):
            try:
                img = read_image(path)
            except (FormatError, OSError) as e:
                logger.warning("Skipping unreadable image %s: %s", path, e)
                continue
            if img.height < self.patch or img.width < self.patch:
                logger.warning("Skipping %s: %dx%d is smaller than patch %d",
                               path, img.height, img.width, self.patch)
                continue
            self.sources.append(img)
        if not self.sources:
            raise InputError(f"No usable images (>= {self.patch}x{self.patch}) in {self.clean_dir}")
        return self.sources

    def make_fixture(self, index, seed):
        rng = np.random.default_rng([seed, index])
        source_index = int(rng.integers(len(self.sources)))
        source = self.sources[source_index]
        top = int(rng.integers(source.height - self.patch + 1))
        left = int(rng.integers(source.width - self.patch + 1))
        clean = Image(source.data[:, top:top + self.patch, left:left + self.patch], tag=source.tag)

        size = int(rng.choice(self.kernel_sizes))
        kernel_seed = int(rng.integers(2 ** 31))
        noise_seed = int(rng.integers(2 ** 31))
        sigma = float(rng.uniform(*self.noise_range))
        kernel = gen_kernel(TrajectoryKernelSpec(size=size, steps=self.steps, anxiety=self.anxiety,
                                                 seed=kernel_seed, smooth=self.smooth))
        blurry = blur(clean, kernel, NoiseSpec(sigma, noise_seed), self.boundary)
        meta = {
            'index': index,
            'seed': seed,
            'sigma': repr(sigma),
            'kernel_size': size,
            'kernel_seed': kernel_seed,
            'noise_seed': noise_seed,
            'source': source.tag,
            'crop': f"{top},{left}",
            'boundary': self.boundary,
        }
        return Fixture(clean=clean, kernel=kernel, blurry=blurry, meta=meta)

    def make_dataset(self, count, seed=0):
        if count < 1:
            raise ParameterError(f"count must be >= 1, got {count}")
        if not self.sources:
            self.load_sources()
        indices = range(count)
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            fixtures = list(tqdm(pool.map(lambda i: self.make_fixture(i, seed), indices),
                                 total=count, desc="Fixtures"))
        sigmas = [f.sigma for f in fixtures]
        self.stats = {
            'count': len(fixtures),
            'sources': len(self.sources),
            'sigma_min': min(sigmas),
            'sigma_max': max(sigmas),
            'kernel_sizes': sorted({int(f.meta['kernel_size']) for f in fixtures}),
        }
        return fixtures

    def generate_report(self):
        print("\n" + "=" * 50)
        print("FIXTURE MANIFEST")
        print("=" * 50)
        print(f"Fixtures: {self.stats.get('count', 0)}")
        print(f"Usable source images: {self.stats.get('sources', 0)}")
        print(f"Sigma range: {self.stats.get('sigma_min', 0):.4f} .. {self.stats.get('sigma_max', 0):.4f}")
        print(f"Kernel sizes: {self.stats.get('kernel_sizes', [])}")


def make_dataset(clean_dir, count, patch=64, kernel_range=(13, 27), noise_range=(0.0, 0.05),
                 seed=0, **options):
    """Functional form of DatasetSynthesizer.make_dataset."""
    return DatasetSynthesizer(clean_dir, patch, kernel_range, noise_range, **options).make_dataset(count, seed)
