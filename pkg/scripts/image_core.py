"""Numeric substrate: image/kernel containers, FFTs, convolution, resampling, metrics.

Images are planar float64 arrays of shape (channels, height, width); kernels are
normalized odd-sized PSFs. Kernel spectra put the kernel center at the origin so the
convolution theorem holds without a phase shift.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
import scipy.ndimage
import torch
import torch.nn.functional as F
from skimage.metrics import structural_similarity

from scripts.exceptions import DimensionError, NumericError, ParameterError

logger = logging.getLogger(__name__)

BOUNDARIES = ('circular', 'replicate_pad_crop')
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
IMAG_TOLERANCE = 1e-6

# Complex coefficients of an unnormalized forward transform.
Spectrum = np.ndarray


@dataclass(eq=False)
class Image:
    """Planar raster, data shape (channels, height, width)."""

    data: np.ndarray
    tag: str = field(default='', compare=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[0] not in (1, 3):
            raise DimensionError(f"Image data must be (1|3, H, W), got shape {data.shape}")
        if data.shape[1] == 0 or data.shape[2] == 0:
            raise DimensionError("Image has an empty extent")
        if not np.all(np.isfinite(data)):
            raise NumericError("Image contains NaN or Inf samples")
        self.data = data

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def extent(self):
        return self.data.shape[1:]

    @classmethod
    def from_hwc(cls, array, tag=''):
        """Build from an interleaved (H, W) or (H, W, C) array."""
        array = np.asarray(array, dtype=np.float64)
        if array.ndim == 3:
            array = np.moveaxis(array, -1, 0)
        return cls(array, tag=tag)

    def to_hwc(self):
        """Interleaved view: (H, W) for gray, (H, W, 3) for color."""
        if self.channels == 1:
            return self.data[0]
        return np.moveaxis(self.data, 0, -1)

    def map_planes(self, fn):
        return Image(np.stack([fn(plane) for plane in self.data]), tag=self.tag)


@dataclass(eq=False)
class Kernel:
    """Normalized point-spread function with odd side lengths."""

    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 2 or taps.shape[0] % 2 == 0 or taps.shape[1] % 2 == 0:
            raise ParameterError(f"Kernel must be 2-D with odd sides, got shape {taps.shape}")
        if not np.all(np.isfinite(taps)) or np.any(taps < 0):
            raise ParameterError("Kernel taps must be finite and non-negative")
        if abs(taps.sum() - 1.0) > 1e-6:
            raise ParameterError(f"Kernel taps must sum to 1, got {taps.sum():.8f}")
        self.taps = taps

    @classmethod
    def from_taps(cls, taps):
        """Normalize arbitrary non-negative taps to unit sum."""
        taps = np.asarray(taps, dtype=np.float64)
        if np.any(taps < 0):
            raise ParameterError("Kernel taps must be non-negative")
        total = taps.sum()
        if not np.isfinite(total) or total <= 0:
            raise ParameterError("Kernel taps must have a positive finite sum")
        return cls(taps / total)

    @classmethod
    def identity(cls):
        return cls(np.ones((1, 1)))

    @property
    def shape(self):
        return self.taps.shape

    @property
    def size(self):
        return self.taps.shape

    @property
    def radius(self):
        return self.taps.shape[0] // 2, self.taps.shape[1] // 2


def fft2(plane):
    """Forward 2-D DFT (unnormalized) of a real plane."""
    plane = np.asarray(plane)
    if plane.ndim < 2 or plane.shape[-1] == 0 or plane.shape[-2] == 0:
        raise DimensionError(f"fft2 needs a non-empty 2-D plane, got shape {plane.shape}")
    return scipy.fft.fft2(plane, axes=(-2, -1))


def ifft2(spec, real=True):
    """Inverse 2-D DFT; with real=True the imaginary residue must be negligible."""
    spec = np.asarray(spec)
    if spec.ndim < 2 or spec.shape[-1] == 0 or spec.shape[-2] == 0:
        raise DimensionError(f"ifft2 needs a non-empty 2-D spectrum, got shape {spec.shape}")
    out = scipy.fft.ifft2(spec, axes=(-2, -1))
    if not real:
        return out
    scale = max(1.0, float(np.max(np.abs(out.real))))
    residue = float(np.max(np.abs(out.imag)))
    if residue > IMAG_TOLERANCE * scale:
        raise NumericError(f"Imaginary residue {residue:.3g} exceeds tolerance for a real output")
    return out.real.copy()


def psf2otf(taps, extent):
    """Spectrum of taps zero-padded to extent with the tap center moved to the origin."""
    taps = np.asarray(taps, dtype=np.float64)
    height, width = extent
    kh, kw = taps.shape
    if kh > height or kw > width:
        raise DimensionError(f"Kernel {kh}x{kw} does not fit extent {height}x{width}")
    padded = np.zeros((height, width))
    padded[:kh, :kw] = taps
    padded = np.roll(padded, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return fft2(padded)


def _check_boundary(boundary):
    if boundary not in BOUNDARIES:
        raise ParameterError(f"Unknown boundary mode '{boundary}', expected one of {BOUNDARIES}")


def convolve_plane(plane, taps, boundary='circular'):
    """Convolve one plane with odd-sized (possibly signed) taps, output keeps the extent."""
    _check_boundary(boundary)
    plane = np.asarray(plane, dtype=np.float64)
    taps = np.asarray(taps, dtype=np.float64)
    if taps.shape[0] > plane.shape[0] or taps.shape[1] > plane.shape[1]:
        raise DimensionError(f"Kernel {taps.shape} larger than plane {plane.shape}")
    if taps.shape[0] % 2 == 0 or taps.shape[1] % 2 == 0:
        raise ParameterError(f"Taps must have odd sides, got {taps.shape}")
    if boundary == 'circular':
        return ifft2(fft2(plane) * psf2otf(taps, plane.shape))
    return scipy.ndimage.convolve(plane, taps, mode='nearest')


def convolve(img, k, boundary='circular'):
    """y = x * k per channel."""
    return img.map_planes(lambda plane: convolve_plane(plane, k.taps, boundary))


def pad_replicate(img, pad_h, pad_w=None):
    """Replicate-pad every side (pad_h rows top/bottom, pad_w columns left/right)."""
    pad_w = pad_h if pad_w is None else pad_w
    data = np.pad(img.data, ((0, 0), (pad_h, pad_h), (pad_w, pad_w)), mode='edge')
    return Image(data, tag=img.tag)


def center_crop(img, height, width):
    top = (img.height - height) // 2
    left = (img.width - width) // 2
    if top < 0 or left < 0:
        raise DimensionError(f"Cannot crop {img.height}x{img.width} to {height}x{width}")
    return Image(img.data[:, top:top + height, left:left + width], tag=img.tag)


def _taper_profile(length, projection):
    """1-D blend weights: 1 at distance >= radius from the border, falling to 0 at the border."""
    weights = np.ones(length)
    radius = len(projection) // 2
    if radius == 0:
        return weights
    acorr = np.correlate(projection, projection, mode='full')[len(projection) - 1:]
    acorr = acorr / acorr[0]
    lags = np.minimum(2 * np.arange(radius), len(acorr) - 1)
    ramp = 1.0 - acorr[lags]
    head = min(radius, length)
    weights[:head] = np.minimum(weights[:head], ramp[:head])
    weights[length - head:] = np.minimum(weights[length - head:], ramp[:head][::-1])
    return weights


def edge_taper(img, k):
    """Blend the border band toward the circularly blurred image to suppress wrap-around ringing."""
    if k.shape[0] > img.height or k.shape[1] > img.width:
        raise DimensionError(f"Kernel {k.shape} larger than image {img.extent}")
    rows = _taper_profile(img.height, k.taps.sum(axis=1))
    cols = _taper_profile(img.width, k.taps.sum(axis=0))
    alpha = np.outer(rows, cols)
    blurred = convolve(img, k, 'circular').data
    return Image(alpha * img.data + (1.0 - alpha) * blurred, tag=img.tag)


def resample_tensor(tensor, scale):
    """Bicubic resampling of a (B, C, H, W) tensor by a factor of 2 ('down2' | 'up2')."""
    height, width = tensor.shape[-2:]
    if scale == 'down2':
        if height % 2 or width % 2:
            raise DimensionError(f"down2 needs even extents, got {height}x{width}")
        size = (height // 2, width // 2)
    elif scale == 'up2':
        size = (height * 2, width * 2)
    else:
        raise ParameterError(f"Unknown scale '{scale}', expected 'down2' or 'up2'")
    return F.interpolate(tensor, size=size, mode='bicubic', align_corners=False)


def resample_bicubic(img, scale):
    with torch.no_grad():
        out = resample_tensor(torch.from_numpy(img.data[None].copy()), scale)
    return Image(out[0].numpy(), tag=img.tag)


def _check_pair(a, b):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"Image shapes differ: {a.data.shape} vs {b.data.shape}")


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; identical images give +inf."""
    _check_pair(a, b)
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a, b, peak=1.0):
    """Windowed SSIM (11x11 Gaussian, sigma 1.5), all channels jointly."""
    _check_pair(a, b)
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs extents >= {SSIM_WINDOW}, got {a.height}x{a.width}")
    return float(structural_similarity(
        a.to_hwc(), b.to_hwc(),
        data_range=peak,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
        channel_axis=-1 if a.channels == 3 else None,
    ))
