"""Feature extractors F_i: fixed linear banks and the learned convolutional extractor."""
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from scripts.exceptions import DimensionError, FormatError, ParameterError
from scripts.image_core import convolve, convolve_plane

logger = logging.getLogger(__name__)

BANK_KINDS = ('intensity', 'gradient', 'intensity+gradient', 'learned')
_ALIASES = {'intensity_plus_gradient': 'intensity+gradient'}

# forward differences x[i+1] - x[i] in convolution orientation
INTENSITY_TAPS = np.array([[1.0]])
DX_TAPS = np.array([[1.0, -1.0, 0.0]])
DY_TAPS = DX_TAPS.T.copy()


def normalize_kind(kind):
    kind = _ALIASES.get(kind, kind)
    if kind not in BANK_KINDS:
        raise ParameterError(f"Unknown bank kind '{kind}', expected one of {BANK_KINDS}")
    return kind


def make_activation(name):
    if name == 'relu':
        return nn.ReLU()
    if name == 'leaky_relu':
        return nn.LeakyReLU(0.2)
    if name == 'identity':
        return nn.Identity()
    raise ParameterError(f"Unknown activation '{name}'")


class ResidualBlock(nn.Module):
    """Pre-activation block: act -> conv3x3 -> act -> conv3x3, identity skip."""

    def __init__(self, width, activation='relu', bias=True, padding_mode='circular'):
        super().__init__()
        self.act1 = make_activation(activation)
        self.conv1 = nn.Conv2d(width, width, 3, padding=1, bias=bias, padding_mode=padding_mode)
        self.act2 = make_activation(activation)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1, bias=bias, padding_mode=padding_mode)

    def forward(self, x):
        return x + self.conv2(self.act2(self.conv1(self.act1(x))))


class FeatureExtractor(nn.Module):
    """One 3x3 convolution followed by residual blocks; circular padding keeps the
    extractor a circular operator, so in the linear regime it commutes with the blur."""

    def __init__(self, in_channels=1, features=16, blocks=3, activation='relu', bias=True):
        super().__init__()
        self.topology = {
            'in_channels': in_channels, 'features': features, 'blocks': blocks,
            'activation': activation, 'bias': bias,
        }
        self.head = nn.Conv2d(in_channels, features, 3, padding=1, bias=bias, padding_mode='circular')
        self.blocks = nn.Sequential(*[ResidualBlock(features, activation, bias) for _ in range(blocks)])

    def forward(self, x):
        return self.blocks(self.head(x))


@dataclass(eq=False)
class FilterBank:
    kind: str
    filters: tuple = ()
    extractor: FeatureExtractor = None

    def feature_count(self, channels):
        """M for an input with the given channel count."""
        if self.kind == 'learned':
            return self.extractor.topology['features']
        return len(self.filters) * channels

    def intensity_planes(self, channels):
        """Indices of planes that are the raw image channels, if any."""
        if self.kind in ('intensity', 'intensity+gradient'):
            return list(range(channels))
        return []


@dataclass(eq=False)
class FeatureStack:
    """M planes sharing one extent, with a provenance tag."""

    planes: np.ndarray
    bank: str = ''
    source: str = ''
    channels: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        planes = np.asarray(self.planes, dtype=np.float64)
        if planes.ndim != 3 or planes.shape[0] < 1:
            raise DimensionError(f"FeatureStack planes must be (M, H, W), got {planes.shape}")
        self.planes = planes

    @property
    def count(self):
        return self.planes.shape[0]

    @property
    def extent(self):
        return self.planes.shape[1:]

    def replace(self, planes, **meta):
        return FeatureStack(planes, self.bank, self.source, self.channels, {**self.meta, **meta})


def builtin_bank(kind):
    """Fixed linear banks. Plane order is filter-major: all channels of filter 0, then filter 1..."""
    kind = normalize_kind(kind)
    if kind == 'intensity':
        return FilterBank(kind, (INTENSITY_TAPS,))
    if kind == 'gradient':
        return FilterBank(kind, (DX_TAPS, DY_TAPS))
    if kind == 'intensity+gradient':
        return FilterBank(kind, (INTENSITY_TAPS, DX_TAPS, DY_TAPS))
    raise ParameterError("The learned bank is built from weights, use load_learned_bank")


def learned_bank(in_channels=1, features=16, activation='relu', bias=True, seed=None):
    """Freshly initialized learned bank."""
    if seed is not None:
        torch.manual_seed(seed)
    return FilterBank('learned', extractor=FeatureExtractor(in_channels, features, 3, activation, bias))


def load_learned_bank(weights):
    """Build the learned bank declared in a weights object (topology header + tensors)."""
    topology = weights.topology.get('extractor')
    if not topology:
        raise FormatError("Weights file declares no feature extractor")
    extractor = FeatureExtractor(**topology)
    prefix = 'extractor.'
    state = {name[len(prefix):]: torch.from_numpy(np.array(t)) for name, t in weights.tensors.items()
             if name.startswith(prefix)}
    expected = extractor.state_dict()
    missing = sorted(set(expected) - set(state))
    if missing:
        raise FormatError(f"Weights are missing extractor tensors: {', '.join(missing)}")
    for name, tensor in state.items():
        if name in expected and tuple(tensor.shape) != tuple(expected[name].shape):
            raise FormatError(f"Tensor extractor.{name} has shape {tuple(tensor.shape)}, "
                              f"expected {tuple(expected[name].shape)}")
    extractor.load_state_dict(state, strict=False)
    extractor.eval()
    return FilterBank('learned', extractor=extractor)


def extract_tensor(bank, tensor):
    """Learned-bank features of a (B, C, H, W) tensor, keeping the autograd graph."""
    channels = bank.extractor.topology['in_channels']
    if tensor.shape[1] != channels:
        raise DimensionError(f"Learned bank expects {channels} channels, got {tensor.shape[1]}")
    dtype = next(bank.extractor.parameters()).dtype
    return bank.extractor(tensor.to(dtype))


def apply_bank(bank, img, boundary='circular'):
    """Plane i = f_i * img (fixed banks) or extractor channel i (learned bank)."""
    if bank.kind == 'learned':
        with torch.no_grad():
            out = extract_tensor(bank, torch.from_numpy(img.data[None].copy()))
        planes = out[0].double().numpy()
    else:
        planes = np.stack([convolve_plane(plane, taps, boundary)
                           for taps in bank.filters for plane in img.data])
    return FeatureStack(planes, bank=bank.kind, source=img.tag, channels=img.channels)


def commutation_residual(bank, img, k):
    """max |F(k * x) - k * F(x)| under circular boundary; exact zero only for linear banks."""
    left = apply_bank(bank, convolve(img, k, 'circular')).planes
    right = np.stack([convolve_plane(p, k.taps, 'circular') for p in apply_bank(bank, img).planes])
    residual = float(np.max(np.abs(left - right)))
    logger.debug("Commutation residual of %s bank: %.3g", bank.kind, residual)
    return residual
