# data_loader.py
import logging
import os
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field

import cv2
import numpy as np
from dotenv import dotenv_values

from scripts.exceptions import FormatError, InputError, ParameterError
from scripts.image_core import Image, Kernel

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = ('.png', '.pgm', '.ppm')
FIXTURE_FILES = ('clean.png', 'blurry.png', 'kernel.txt', 'meta')


@contextmanager
def atomic_path(path):
    """Yield a temp path next to `path`; rename over it only if the block succeeds."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    suffix = os.path.splitext(path)[1]
    fd, tmp = tempfile.mkstemp(prefix='.tmp-', suffix=suffix, dir=directory)
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def read_image(path):
    """Read PNG (8/16-bit), PGM or PPM into an Image with samples in [0, 1]."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"File not found: {path}")
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"Unreadable image: {path}")
    if raw.dtype == np.uint8:
        max_code = 255.0
    elif raw.dtype == np.uint16:
        max_code = 65535.0
    else:
        raise FormatError(f"Unsupported sample type {raw.dtype} in {path}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[:, :, :3]
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    return Image.from_hwc(raw.astype(np.float64) / max_code, tag=os.path.basename(path))


def quantize(img, bits=8):
    """Re-quantize [0, 1] samples with round-half-up; out-of-range values are clipped."""
    if bits not in (8, 16):
        raise ParameterError(f"bits must be 8 or 16, got {bits}")
    max_code = 255 if bits == 8 else 65535
    codes = np.floor(np.clip(img.to_hwc(), 0.0, 1.0) * max_code + 0.5)
    return codes.astype(np.uint8 if bits == 8 else np.uint16)


def write_image(img, path, bits=8):
    """Write an Image as PNG/PGM/PPM atomically."""
    ext = os.path.splitext(path)[1].lower()
    if ext not in IMAGE_EXTENSIONS:
        raise FormatError(f"Unsupported image extension '{ext}' for {path}")
    codes = quantize(img, bits)
    if codes.ndim == 3:
        codes = cv2.cvtColor(codes, cv2.COLOR_RGB2BGR)
    with atomic_path(path) as tmp:
        if not cv2.imwrite(tmp, codes):
            raise OSError(f"Could not write image: {path}")


def read_kernel(path):
    """Text kernel: first line 'kh kw', then kh rows of kw taps; normalized to sum 1."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"File not found: {path}")
    with open(path) as fh:
        lines = [line.split() for line in fh if line.strip()]
    try:
        kh, kw = (int(v) for v in lines[0])
        rows = [[float(v) for v in row] for row in lines[1:]]
    except (ValueError, IndexError):
        raise FormatError(f"Malformed kernel file: {path}") from None
    if len(rows) != kh or any(len(row) != kw for row in rows):
        raise FormatError(f"Kernel file {path} does not hold {kh}x{kw} taps")
    try:
        return Kernel.from_taps(np.array(rows))
    except ParameterError as e:
        raise FormatError(f"Invalid kernel in {path}: {e}") from None


def write_kernel(k, path):
    kh, kw = k.shape
    with atomic_path(path) as tmp:
        with open(tmp, 'w') as fh:
            fh.write(f"{kh} {kw}\n")
            for row in k.taps:
                fh.write(' '.join(repr(float(v)) for v in row) + '\n')


def read_meta(path):
    """Plain-text key=value metadata."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"File not found: {path}")
    return {key: value for key, value in dotenv_values(path).items()}


def write_meta(meta, path):
    with atomic_path(path) as tmp:
        with open(tmp, 'w') as fh:
            for key, value in meta.items():
                fh.write(f"{key}={value}\n")


def save_table(df, path):
    """Save a DataFrame to CSV atomically."""
    with atomic_path(path) as tmp:
        df.to_csv(tmp, index=False)
    logger.info("Saved %d rows to %s", len(df), path)


def list_images(directory):
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"Directory not found: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(IMAGE_EXTENSIONS))
    return [os.path.join(directory, n) for n in names]


@dataclass(eq=False)
class Fixture:
    """One (clean, kernel, blurry, metadata) tuple."""

    clean: Image
    kernel: Kernel
    blurry: Image
    meta: dict = field(default_factory=dict)

    @property
    def sigma(self):
        return float(self.meta.get('sigma', 0.0))

    @property
    def name(self):
        return str(self.meta.get('name', self.meta.get('index', '')))


def fixture_channels(fixtures):
    """Channel count shared by every fixture of a set."""
    counts = sorted({f.clean.channels for f in fixtures})
    if not counts:
        raise InputError("Empty fixture set")
    if len(counts) > 1:
        raise InputError(f"Fixture set mixes channel counts {counts}")
    return counts[0]


class FixtureLoader:
    """Load and save fixture sets: numbered subfolders with clean/blurry/kernel/meta.

    Next to the 16-bit `blurry.png`, `blurry.npy` keeps the unclipped float samples; it
    is preferred on load when present.
    """

    def __init__(self, path=None):
        self.path = path
        self.fixtures = []

    def load(self, path=None, require_clean=False):
        """Load every complete fixture folder, sorted by name.

        Incomplete folders are skipped with a warning; with `require_clean`, a folder
        without ground truth is an InputError instead.
        """
        directory = path or self.path
        if not directory:
            raise ValueError("No fixture directory specified for loading data.")
        if not os.path.isdir(directory):
            raise FileNotFoundError(f"Directory not found: {directory}")

        self.fixtures = []
        for name in sorted(os.listdir(directory)):
            folder = os.path.join(directory, name)
            if not os.path.isdir(folder):
                continue
            missing = [f for f in FIXTURE_FILES if not os.path.exists(os.path.join(folder, f))]
            if require_clean and 'clean.png' in missing:
                raise InputError(f"Fixture {folder} has no ground truth (clean.png)")
            if missing:
                logger.warning("Skipping %s: missing %s", folder, ', '.join(missing))
                continue
            meta = read_meta(os.path.join(folder, 'meta'))
            meta['name'] = name
            raw = os.path.join(folder, 'blurry.npy')
            if os.path.exists(raw):
                blurry = Image(np.load(raw), tag=name)
            else:
                blurry = read_image(os.path.join(folder, 'blurry.png'))
            self.fixtures.append(Fixture(
                clean=read_image(os.path.join(folder, 'clean.png')),
                kernel=read_kernel(os.path.join(folder, 'kernel.txt')),
                blurry=blurry,
                meta=meta,
            ))
        if not self.fixtures:
            raise InputError(f"No fixtures found in {directory}")
        logger.info("Loaded %d fixtures from %s", len(self.fixtures), directory)
        return self.fixtures

    def save(self, output_dir, fixtures=None):
        """Write fixtures as zero-padded numbered folders; blurry is stored as 16-bit PNG
        plus the unclipped samples in blurry.npy."""
        fixtures = self.fixtures if fixtures is None else fixtures
        if not fixtures:
            raise ValueError("No fixtures to save.")
        os.makedirs(output_dir, exist_ok=True)
        for fixture in fixtures:
            folder = os.path.join(output_dir, f"{int(fixture.meta['index']):04d}")
            os.makedirs(folder, exist_ok=True)
            write_image(fixture.clean, os.path.join(folder, 'clean.png'))
            write_image(fixture.blurry, os.path.join(folder, 'blurry.png'), bits=16)
            with atomic_path(os.path.join(folder, 'blurry.npy')) as tmp:
                np.save(tmp, fixture.blurry.data)
            write_kernel(fixture.kernel, os.path.join(folder, 'kernel.txt'))
            write_meta({k: v for k, v in fixture.meta.items() if k != 'name'}, os.path.join(folder, 'meta'))
        logger.info("Saved %d fixtures to %s", len(fixtures), output_dir)
        return output_dir
