"""Feature-space Wiener deconvolution.

For every feature plane i the operator is

    G_i = conj(F(K)) / (|F(K)|^2 + s_n(i) / s_x(i) + eps)

applied in the Fourier domain. s_x is the standard deviation of the blurry feature and
s_n the variance of its difference to a mean-filtered copy (global scalars per plane).
"""
import logging
from dataclasses import dataclass

import numpy as np
import scipy.ndimage
import torch

from scripts.exceptions import DimensionError, ParameterError
from scripts.filter_bank import FeatureStack, apply_bank, builtin_bank
from scripts.image_core import Image, edge_taper, fft2, ifft2, pad_replicate, psf2otf

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-12
STATS_FLOOR = 1e-12
_COMPLEX = {torch.float32: torch.complex64, torch.float64: torch.complex128}


@dataclass(eq=False)
class WienerStats:
    """Per-feature signal power s_x and noise power s_n."""

    s_x: np.ndarray
    s_n: np.ndarray

    def __post_init__(self):
        self.s_x = np.atleast_1d(np.asarray(self.s_x, dtype=np.float64))
        self.s_n = np.atleast_1d(np.asarray(self.s_n, dtype=np.float64))
        if self.s_x.shape != self.s_n.shape:
            raise DimensionError(f"s_x {self.s_x.shape} and s_n {self.s_n.shape} differ in length")
        if not (np.all(np.isfinite(self.s_x)) and np.all(np.isfinite(self.s_n))):
            raise ParameterError("Wiener statistics must be finite")
        if np.any(self.s_x <= 0) or np.any(self.s_n < 0):
            raise ParameterError("Wiener statistics need s_x > 0 and s_n >= 0")

    @classmethod
    def from_ratio(cls, ratio, count):
        """Fixed regularization ratio s_n/s_x for every feature."""
        if ratio < 0:
            raise ParameterError(f"SNR ratio must be >= 0, got {ratio}")
        return cls(np.ones(count), np.full(count, float(ratio)))

    @property
    def ratio(self):
        return self.s_n / self.s_x

    def __len__(self):
        return len(self.s_x)


@dataclass(eq=False)
class WienerOperator:
    """Frequency response per feature, shape (M, H, W)."""

    response: np.ndarray

    @property
    def extent(self):
        return self.response.shape[1:]

    @property
    def count(self):
        return self.response.shape[0]


def estimate_stats(stack, mean_filter=3, squared_sx=False):
    planes = stack.planes if isinstance(stack, FeatureStack) else np.asarray(stack, dtype=np.float64)
    if planes.size == 0:
        raise DimensionError("Cannot estimate statistics of an empty stack")
    s_x = planes.std(axis=(1, 2))
    if squared_sx:
        s_x = s_x ** 2
    s_x = np.maximum(s_x, STATS_FLOOR)
    smoothed = scipy.ndimage.uniform_filter(planes, size=(1, mean_filter, mean_filter), mode='nearest')
    s_n = (planes - smoothed).var(axis=(1, 2))
    logger.debug("Estimated stats: s_x=%s s_n=%s", np.round(s_x, 6), np.round(s_n, 8))
    return WienerStats(s_x, s_n)


def build_operator(k, stats, extent, eps=DEFAULT_EPS):
    otf = psf2otf(k.taps, extent)
    ratio = stats.ratio[:, None, None]
    response = np.conj(otf)[None] / (np.abs(otf)[None] ** 2 + ratio + eps)
    return WienerOperator(response)


def deconvolve_features(stack, op):
    """Plane i = ifft2(response_i * fft2(plane i))."""
    if tuple(stack.extent) != tuple(op.extent):
        raise DimensionError(f"Stack extent {stack.extent} differs from operator extent {op.extent}")
    if stack.count != op.count:
        raise DimensionError(f"Stack has {stack.count} planes, operator {op.count}")
    return stack.replace(ifft2(op.response * fft2(stack.planes)), deconvolved=True)


class WienerDeconvolution(torch.autograd.Function):
    """Differentiable Wiener step. The map is linear in the features; its adjoint applies
    the conjugate response. The response (kernel and statistics) is a constant."""

    @staticmethod
    def forward(ctx, features, response):
        ctx.save_for_backward(response)
        return torch.fft.ifft2(response * torch.fft.fft2(features)).real

    @staticmethod
    def backward(ctx, grad_output):
        (response,) = ctx.saved_tensors
        grad = torch.fft.ifft2(response.conj() * torch.fft.fft2(grad_output)).real
        return grad, None


def wiener_tensor(features, response):
    """Apply a (…, M, H, W) response to (…, M, H, W) features, keeping the graph."""
    response = torch.as_tensor(response).to(_COMPLEX[features.dtype])
    return WienerDeconvolution.apply(features, response)


def adjoint_tensor(values, response):
    """Gᵀ v realized with the conjugated response."""
    response = torch.as_tensor(response).to(_COMPLEX[values.dtype])
    return torch.fft.ifft2(response.conj() * torch.fft.fft2(values)).real


def prepare_observation(y, k, boundary='replicate_pad_crop', taper=True):
    """Circular: unchanged. replicate_pad_crop: pad by the kernel radius, then edge-taper."""
    if k.shape[0] > y.height or k.shape[1] > y.width:
        raise DimensionError(f"Kernel {k.shape[0]}x{k.shape[1]} is larger than image {y.height}x{y.width}")
    if boundary == 'circular':
        return y
    if boundary != 'replicate_pad_crop':
        raise ParameterError(f"Unknown boundary mode '{boundary}'")
    rh, rw = k.radius
    padded = pad_replicate(y, rh, rw)
    return edge_taper(padded, k) if taper else padded


def crop_planes(planes, extent):
    height, width = extent
    top = (planes.shape[-2] - height) // 2
    left = (planes.shape[-1] - width) // 2
    return planes[..., top:top + height, left:left + width]


def resolve_stats(stack, stats=None, ratio=None, mean_filter=3, squared_sx=False):
    """Explicit stats win over a fixed ratio, which wins over estimation."""
    if stats is not None:
        if len(stats) != stack.count:
            raise DimensionError(f"Stats hold {len(stats)} features, stack {stack.count}")
        return stats
    if ratio is not None:
        logger.info("Using fixed SNR ratio %.4g instead of estimated statistics", ratio)
        return WienerStats.from_ratio(ratio, stack.count)
    return estimate_stats(stack, mean_filter, squared_sx)


def deconvolve_observation(y, k, bank, boundary='replicate_pad_crop', stats=None, ratio=None,
                           mean_filter=3, squared_sx=False, eps=DEFAULT_EPS, taper=True):
    """Boundary handling, features, statistics, operator and deconvolution; cropped to y."""
    prepared = prepare_observation(y, k, boundary, taper)
    stack = apply_bank(bank, prepared, 'circular')
    stats = resolve_stats(stack, stats, ratio, mean_filter, squared_sx)
    op = build_operator(k, stats, stack.extent, eps)
    out = deconvolve_features(stack, op)
    return FeatureStack(crop_planes(out.planes, y.extent), out.bank, y.tag, out.channels, out.meta)


def wiener_image(y, k, stats_or_ratio=None, boundary='replicate_pad_crop', **options):
    """Classical image-space Wiener deconvolution: the intensity-bank special case."""
    stats = stats_or_ratio if isinstance(stats_or_ratio, WienerStats) else None
    ratio = None if stats is not None else stats_or_ratio
    out = deconvolve_observation(y, k, builtin_bank('intensity'), boundary, stats, ratio, **options)
    return Image(out.planes, tag=y.tag)
