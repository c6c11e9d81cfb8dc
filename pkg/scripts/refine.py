"""Multi-scale refinement: feature pyramid, refiner network, full deblurring model.

Scales run coarse to fine. The coarsest level sees only its deconvolved features; every
finer level sees its features concatenated with the bicubic-upsampled hidden features
of the previous level. One network is shared across scales; only the entry convolution
differs, since the finer levels carry `hidden` extra channels.
"""
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from scripts.exceptions import DimensionError, NumericError, ParameterError, TopologyError
from scripts.filter_bank import (FeatureStack, ResidualBlock, apply_bank, builtin_bank,
                                 extract_tensor, learned_bank, make_activation, normalize_kind)
from scripts.image_core import Image, resample_tensor
from scripts.wiener_core import (DEFAULT_EPS, build_operator, crop_planes, deconvolve_observation,
                                 prepare_observation, resolve_stats, wiener_tensor)

logger = logging.getLogger(__name__)

REFINER_KINDS = ('encoder_decoder', 'basic')
# two stride-2 stages inside the encoder-decoder
ENCODER_FACTOR = 4


@dataclass
class Pyramid:
    """Feature tensors (B, M, h, w), coarsest level first, factor 2 between levels."""

    levels: list

    def __len__(self):
        return len(self.levels)

    def extent(self, level):
        return tuple(self.levels[level].shape[-2:])

    def stack(self, level, index=0):
        return FeatureStack(self.levels[level][index].detach().double().numpy(), meta={'level': level})


@dataclass
class RefineOutput:
    images: list
    hidden: list


def build_pyramid(stack, levels):
    """Level L is the input; each coarser level is a bicubic down2 of the next."""
    if levels < 1:
        raise ParameterError(f"levels must be >= 1, got {levels}")
    if isinstance(stack, FeatureStack):
        tensor = torch.from_numpy(stack.planes[None].copy())
    else:
        tensor = stack
    height, width = tensor.shape[-2:]
    factor = 2 ** (levels - 1)
    if height % factor or width % factor:
        raise DimensionError(f"Extent {height}x{width} is not divisible by {factor} for {levels} levels")
    out = [tensor]
    for _ in range(levels - 1):
        out.insert(0, resample_tensor(out[0], 'down2'))
    return Pyramid(out)


class _ScaleNet(nn.Module):
    """Shared trunk with separate entry convolutions for the coarsest and finer levels."""

    def __init__(self, in_features, out_channels, hidden, width, activation):
        super().__init__()
        self.in_features = in_features
        self.out_channels = out_channels
        self.hidden = hidden
        self.entry_coarse = nn.Conv2d(in_features, width, 3, padding=1)
        self.entry_fine = nn.Conv2d(in_features + hidden, width, 3, padding=1)
        self.entry_act = make_activation(activation)

    def expected_channels(self, first):
        return self.in_features if first else self.in_features + self.hidden

    def enter(self, x, first):
        expected = self.expected_channels(first)
        if x.shape[1] != expected:
            raise TopologyError(f"Refiner expects {expected} input channels, got {x.shape[1]}")
        return self.entry_act((self.entry_coarse if first else self.entry_fine)(x))


class RefinerNet(_ScaleNet):
    """Encoder (two stride-2 stages, 16 -> 32) and decoder (two upsampling stages with
    skip concatenation), 3x3 convolutions, 1x1 head. The decoder output before the head
    is the hidden feature passed to the next scale."""

    def __init__(self, in_features, out_channels=1, hidden=16, width=16, activation='leaky_relu'):
        super().__init__(in_features, out_channels, hidden, width, activation)
        wide = 2 * width
        self.down1 = nn.Sequential(nn.Conv2d(width, wide, 3, stride=2, padding=1), make_activation(activation))
        self.down2 = nn.Sequential(nn.Conv2d(wide, wide, 3, stride=2, padding=1), make_activation(activation))
        self.up1 = nn.Sequential(nn.ConvTranspose2d(wide, wide, 2, stride=2), make_activation(activation))
        self.fuse1 = nn.Sequential(nn.Conv2d(2 * wide, wide, 3, padding=1), make_activation(activation))
        self.up2 = nn.Sequential(nn.ConvTranspose2d(wide, width, 2, stride=2), make_activation(activation))
        self.fuse2 = nn.Sequential(nn.Conv2d(2 * width, hidden, 3, padding=1), make_activation(activation))
        self.head = nn.Conv2d(hidden, out_channels, 1)

    def forward(self, x, first=True):
        height, width = x.shape[-2:]
        if height % ENCODER_FACTOR or width % ENCODER_FACTOR:
            raise DimensionError(f"Refiner input {height}x{width} is not divisible by {ENCODER_FACTOR}")
        e0 = self.enter(x, first)
        e1 = self.down1(e0)
        e2 = self.down2(e1)
        d1 = self.fuse1(torch.cat([self.up1(e2), e1], dim=1))
        hidden = self.fuse2(torch.cat([self.up2(d1), e0], dim=1))
        return self.head(hidden), hidden


class BasicReconstruction(_ScaleNet):
    """Three residual blocks followed by one convolution; no encoder-decoder."""

    def __init__(self, in_features, out_channels=1, hidden=16, width=16, activation='leaky_relu'):
        super().__init__(in_features, out_channels, hidden, hidden, activation)
        self.blocks = nn.Sequential(*[ResidualBlock(hidden, activation, padding_mode='zeros') for _ in range(3)])
        self.head = nn.Conv2d(hidden, out_channels, 3, padding=1)

    def forward(self, x, first=True):
        hidden = self.blocks(self.enter(x, first))
        return self.head(hidden), hidden


def build_refiner(kind, in_features, out_channels=1, hidden=16, activation='leaky_relu'):
    if kind == 'encoder_decoder':
        return RefinerNet(in_features, out_channels, hidden, activation=activation)
    if kind == 'basic':
        return BasicReconstruction(in_features, out_channels, hidden, activation=activation)
    raise ParameterError(f"Unknown refiner kind '{kind}', expected one of {REFINER_KINDS}")


def refine_forward(pyr, net):
    """x^1 = N(level 1); x^l = N(concat(level l, up2(hidden of level l-1)))."""
    images, hidden = [], []
    previous = None
    for level in pyr.levels:
        if previous is None:
            x = level
        else:
            upsampled = resample_tensor(previous, 'up2')
            if upsampled.shape[-2:] != level.shape[-2:]:
                raise DimensionError(f"Upsampled hidden {tuple(upsampled.shape[-2:])} does not match "
                                     f"level {tuple(level.shape[-2:])}")
            x = torch.cat([level, upsampled], dim=1)
        image, previous = net(x, first=len(images) == 0)
        images.append(image)
        hidden.append(previous)
    return RefineOutput(images, hidden)


def refine_padded(features, net, levels):
    """Replicate-pad (bottom/right) to a multiple of 4 * 2^(L-1), refine, crop every scale."""
    height, width = features.shape[-2:]
    factor = ENCODER_FACTOR * 2 ** (levels - 1) if isinstance(net, RefinerNet) else 2 ** (levels - 1)
    pad_h, pad_w = (-height) % factor, (-width) % factor
    if pad_h or pad_w:
        logger.debug("Padding %dx%d features by (%d, %d) for the refiner", height, width, pad_h, pad_w)
        features = F.pad(features, (0, pad_w, 0, pad_h), mode='replicate')
    out = refine_forward(build_pyramid(features, levels), net)
    images = []
    for index, image in enumerate(out.images):
        scale = 2 ** (levels - 1 - index)
        images.append(image[..., :-(-height // scale), :-(-width // scale)])
    return RefineOutput(images, out.hidden)


class DeblurModel(nn.Module):
    """Feature extraction, Wiener step and multi-scale refiner as one trainable module."""

    def __init__(self, bank='learned', channels=1, levels=2, features=16, refiner='encoder_decoder',
                 hidden=16, activation='leaky_relu', use_wiener=True, boundary='replicate_pad_crop',
                 ratio=None, mean_filter=3, squared_sx=False, eps=DEFAULT_EPS):
        super().__init__()
        kind = normalize_kind(bank)
        self.kind = kind
        self.channels = channels
        self.levels = levels
        self.use_wiener = use_wiener
        self.boundary = boundary
        self.stats_options = {'ratio': ratio, 'mean_filter': mean_filter, 'squared_sx': squared_sx}
        self.eps = eps
        if kind == 'learned':
            self.bank = learned_bank(channels, features)
            self.extractor = self.bank.extractor
        else:
            self.bank = builtin_bank(kind)
            self.extractor = None
        self.refiner_kind = refiner
        self.activation = activation
        self.refiner = build_refiner(refiner, self.bank.feature_count(channels), channels, hidden, activation)

    def topology(self):
        return {
            'bank': self.kind,
            'channels': self.channels,
            'levels': self.levels,
            'use_wiener': self.use_wiener,
            'boundary': self.boundary,
            'stats': {**self.stats_options, 'eps': self.eps},
            'extractor': self.extractor.topology if self.extractor is not None else None,
            'refiner': {'kind': self.refiner_kind, 'hidden': self.refiner.hidden,
                        'activation': self.activation},
        }

    @classmethod
    def from_topology(cls, topology):
        extractor = topology.get('extractor') or {}
        refiner = topology['refiner']
        stats = topology.get('stats', {})
        return cls(bank=topology['bank'], channels=topology['channels'], levels=topology['levels'],
                   features=extractor.get('features', 16), refiner=refiner['kind'],
                   hidden=refiner['hidden'], activation=refiner['activation'],
                   use_wiener=topology['use_wiener'], boundary=topology['boundary'],
                   ratio=stats.get('ratio'), mean_filter=stats.get('mean_filter', 3),
                   squared_sx=stats.get('squared_sx', False), eps=stats.get('eps', DEFAULT_EPS))

    @property
    def dtype(self):
        return next(self.refiner.parameters()).dtype

    def features(self, y, k):
        """Deconvolved (or, without the Wiener step, raw) features of one observation, (M, H, W)."""
        prepared = prepare_observation(y, k, self.boundary) if self.use_wiener else y
        if self.extractor is not None:
            feats = extract_tensor(self.bank, torch.from_numpy(prepared.data[None].copy()))[0]
        else:
            feats = torch.from_numpy(apply_bank(self.bank, prepared, 'circular').planes).to(self.dtype)
        if not self.use_wiener:
            return feats
        stack = FeatureStack(feats.detach().double().numpy())
        stats = resolve_stats(stack, None, **self.stats_options)
        op = build_operator(k, stats, stack.extent, self.eps)
        return crop_planes(wiener_tensor(feats, torch.from_numpy(op.response)), y.extent)

    def forward(self, observations, kernels):
        batch = torch.stack([self.features(y, k) for y, k in zip(observations, kernels)]).to(self.dtype)
        return refine_padded(batch, self.refiner, self.levels)

    def deblur(self, y, k):
        with torch.no_grad():
            out = self.forward([y], [k])
        image = out.images[-1][0].double().numpy()
        if not np.all(np.isfinite(image)):
            raise NumericError(f"Refiner produced {int(np.sum(~np.isfinite(image)))} non-finite samples")
        return Image(image, tag=y.tag)


def deblur_pipeline(y, k, bank, net=None, levels=2, boundary='replicate_pad_crop', **options):
    """apply_bank -> estimate_stats -> build_operator -> deconvolve_features -> pyramid -> refiner.

    net=None is the identity head: the deconvolved intensity planes are the estimate.
    """
    stack = deconvolve_observation(y, k, bank, boundary, **options)
    if net is None:
        planes = bank.intensity_planes(y.channels)
        if not planes:
            raise ParameterError(f"The {bank.kind} bank has no intensity planes to return without a refiner")
        return Image(stack.planes[planes], tag=y.tag)
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        out = refine_padded(torch.from_numpy(stack.planes[None].copy()).to(dtype), net, levels)
    image = out.images[-1][0].double().numpy()
    if not np.all(np.isfinite(image)):
        raise NumericError(f"Refiner produced {int(np.sum(~np.isfinite(image)))} non-finite samples")
    return Image(image, tag=y.tag)
