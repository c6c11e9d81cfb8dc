"""End-to-end training of the feature extractor and refiner.

Gradients flow through the extractor, the Wiener step (a linear map whose adjoint uses
the conjugate response) and the refiner. The Wiener statistics are estimated from
detached features and act as constants of each forward pass.
"""
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from scripts.blur_sim import perturb_kernel
from scripts.data_loader import atomic_path, fixture_channels
from scripts.exceptions import DimensionError, FormatError, NumericError, ParameterError, TopologyError
from scripts.image_core import Image, psnr, resample_tensor
from scripts.refine import DeblurModel

logger = logging.getLogger(__name__)

MAGIC = b'DWDN'
FORMAT_VERSION = 1
LOG_COLUMNS = ['iteration', 'lr', 'train_loss', 'val_psnr']
_ADAM_PREFIXES = ('adam.m.', 'adam.v.')


@dataclass(eq=False)
class RefinerWeights:
    """Named float32 tensors of a DeblurModel plus its topology header.

    `state` holds the schedule position (step, epoch); optimizer moments travel as extra
    tensors named adam.m.<param> / adam.v.<param>.
    """

    topology: dict
    tensors: dict
    state: dict = field(default_factory=dict)

    def __post_init__(self):
        tensors = {}
        for name, value in self.tensors.items():
            array = np.asarray(value, dtype=np.float32)
            if not np.all(np.isfinite(array)):
                raise NumericError(f"Tensor {name} holds NaN or Inf values")
            tensors[name] = array
        self.tensors = tensors

    @classmethod
    def from_model(cls, model, adam_state=None, step=0, epoch=0):
        tensors = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
        if adam_state is not None:
            for name in adam_state.m:
                tensors[f'adam.m.{name}'] = adam_state.m[name].detach().cpu().numpy()
                tensors[f'adam.v.{name}'] = adam_state.v[name].detach().cpu().numpy()
        return cls(model.topology(), tensors, {'step': int(step), 'epoch': int(epoch)})

    def model_tensors(self):
        return {n: t for n, t in self.tensors.items() if not n.startswith(_ADAM_PREFIXES)}

    def to_model(self):
        """Build the declared DeblurModel and load the tensors; shapes must match."""
        try:
            model = DeblurModel.from_topology(self.topology)
        except (KeyError, TypeError) as e:
            raise FormatError(f"Malformed topology header: {e}") from None
        expected = model.state_dict()
        tensors = self.model_tensors()
        missing = sorted(set(expected) - set(tensors))
        unknown = sorted(set(tensors) - set(expected))
        if missing or unknown:
            raise FormatError(f"Weights do not match topology (missing: {missing}, unexpected: {unknown})")
        state = {}
        for name, array in tensors.items():
            if tuple(array.shape) != tuple(expected[name].shape):
                raise FormatError(f"Tensor {name} has shape {tuple(array.shape)}, "
                                  f"expected {tuple(expected[name].shape)}")
            state[name] = torch.from_numpy(array.copy())
        model.load_state_dict(state)
        return model

    def adam_state(self):
        state = AdamState()
        for name, array in self.tensors.items():
            if name.startswith('adam.m.'):
                state.m[name[len('adam.m.'):]] = torch.from_numpy(array.copy())
            elif name.startswith('adam.v.'):
                state.v[name[len('adam.v.'):]] = torch.from_numpy(array.copy())
        state.t = int(self.state.get('step', 0))
        return state

    def save(self, path):
        """magic, u32 version, u32 header length, JSON header, little-endian f32 payloads."""
        names = list(self.tensors)
        header = json.dumps({
            'topology': self.topology,
            'state': self.state,
            'manifest': [{'name': n, 'dtype': 'float32', 'shape': list(self.tensors[n].shape)} for n in names],
        }).encode('utf-8')
        with atomic_path(path) as tmp:
            with open(tmp, 'wb') as fh:
                fh.write(MAGIC)
                fh.write(struct.pack('<II', FORMAT_VERSION, len(header)))
                fh.write(header)
                for name in names:
                    fh.write(self.tensors[name].astype('<f4').tobytes())
        logger.info("Saved %d tensors to %s", len(names), path)
        return path

    @classmethod
    def load(cls, path):
        if not os.path.exists(path):
            raise FileNotFoundError(f"File not found: {path}")
        with open(path, 'rb') as fh:
            blob = fh.read()
        if blob[:4] != MAGIC:
            raise FormatError(f"{path} is not a weights file (bad magic)")
        try:
            version, length = struct.unpack('<II', blob[4:12])
            header = json.loads(blob[12:12 + length].decode('utf-8'))
        except (struct.error, ValueError) as e:
            raise FormatError(f"Corrupt weights header in {path}: {e}") from None
        if version != FORMAT_VERSION:
            raise FormatError(f"Unsupported weights format version {version}")
        offset = 12 + length
        tensors = {}
        for entry in header.get('manifest', []):
            if entry.get('dtype') != 'float32':
                raise FormatError(f"Unsupported dtype {entry.get('dtype')} for {entry.get('name')}")
            shape = tuple(entry['shape'])
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if offset + nbytes > len(blob):
                raise FormatError(f"Weights file {path} is truncated at tensor {entry['name']}")
            tensors[entry['name']] = np.frombuffer(blob, dtype='<f4', count=nbytes // 4,
                                                   offset=offset).reshape(shape)
            offset += nbytes
        if offset != len(blob):
            raise FormatError(f"Weights file {path} has {len(blob) - offset} trailing bytes")
        return cls(header.get('topology', {}), tensors, header.get('state', {}))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_halve_every: int = 200
    batch: int = 4
    epochs: int = 1000
    iterations: int = 2000
    gamma: tuple = (1.0, 1.0)
    seed: int = 0
    patch: int = 64
    checkpoint_every: int = 10
    kernel_noise: float = 0.0
    val_count: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")
        if self.batch < 1:
            raise ParameterError(f"batch must be >= 1, got {self.batch}")
        if self.lr_halve_every < 1:
            raise ParameterError(f"lr_halve_every must be >= 1, got {self.lr_halve_every}")
        self.gamma = tuple(float(g) for g in self.gamma)

    @classmethod
    def from_cli(cls, config):
        return cls(lr=config['train.lr'], lr_halve_every=config['train.lr_halve_every'],
                   batch=config['train.batch'], epochs=config['train.epochs'],
                   iterations=config['train.iterations'], gamma=tuple(config.gamma()),
                   seed=config['seed'], patch=config['train.patch'],
                   checkpoint_every=config['train.checkpoint_every'],
                   kernel_noise=config['train.kernel_noise'], val_count=config['train.val_count'])


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def learning_rate(config, epoch):
    """lr halved every `lr_halve_every` epochs."""
    return config.lr * 0.5 ** (epoch // config.lr_halve_every)


def loss_multiscale(preds, gt, gamma):
    """sum_l gamma_l * mean |x^l - gt^l|, gt^l the bicubic-downsampled ground truth."""
    if len(gamma) != len(preds):
        raise ParameterError(f"{len(gamma)} loss weights for {len(preds)} scales")
    if isinstance(gt, Image):
        gt = torch.from_numpy(gt.data[None].copy())
    gt = gt.to(preds[-1].dtype)
    if tuple(gt.shape[-2:]) != tuple(preds[-1].shape[-2:]):
        raise DimensionError(f"Ground truth {tuple(gt.shape[-2:])} does not match finest scale "
                             f"{tuple(preds[-1].shape[-2:])}")
    targets = [gt]
    for _ in range(len(preds) - 1):
        targets.insert(0, resample_tensor(targets[0], 'down2'))
    total = preds[-1].new_zeros(())
    for weight, pred, target in zip(gamma, preds, targets):
        if tuple(target.shape) != tuple(pred.shape):
            raise DimensionError(f"Scale shape {tuple(pred.shape)} does not match ground truth {tuple(target.shape)}")
        total = total + weight * torch.mean(torch.abs(pred - target))
    return total


def backward(loss, model):
    """Gradients for every trainable tensor; unused tensors get zeros."""
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(p)) for n, p, g in zip(names, params, grads)}


def adam_step(weights, grads, state, t, config):
    """In-place Adam update of `weights` (name -> tensor) with bias correction."""
    if t < 1:
        raise ParameterError(f"Adam step counter must be >= 1, got {t}")
    for name, grad in grads.items():
        if not torch.all(torch.isfinite(grad)):
            raise NumericError(f"Non-finite gradient for {name} at step {t} "
                               f"(max |g| = {float(torch.nan_to_num(grad).abs().max()):.3g})")
    with torch.no_grad():
        for name, param in weights.items():
            grad = grads[name]
            m = state.m.get(name)
            v = state.v.get(name)
            if m is None:
                m, v = torch.zeros_like(param), torch.zeros_like(param)
            elif m.shape != param.shape:
                raise DimensionError(f"Adam state for {name} has shape {tuple(m.shape)}, "
                                     f"parameter {tuple(param.shape)}")
            m = config.beta1 * m + (1 - config.beta1) * grad
            v = config.beta2 * v + (1 - config.beta2) * grad * grad
            m_hat = m / (1 - config.beta1 ** t)
            v_hat = v / (1 - config.beta2 ** t)
            param -= config.lr * m_hat / (torch.sqrt(v_hat) + config.adam_eps)
            state.m[name], state.v[name] = m, v
    state.t = t
    return weights, state


def _crop(img, top, left, size):
    return Image(img.data[:, top:top + size, left:left + size], tag=img.tag)


class Trainer:
    """Runs the training loop: random crops, Adam, lr schedule, validation PSNR,
    append-only CSV log and atomic checkpoints."""

    def __init__(self, model, config, weights_path=None, log_path=None):
        if len(config.gamma) != model.levels:
            raise ParameterError(f"{len(config.gamma)} loss weights for {model.levels} levels")
        self.model = model
        self.config = config
        self.weights_path = weights_path
        self.log_path = log_path
        self.adam = AdamState()
        self.step = 0
        self.epoch = 0
        self.losses = []
        self.rows = []

    def resume(self, path):
        """Restore model tensors, optimizer moments and schedule position."""
        weights = RefinerWeights.load(path)
        if weights.topology != self.model.topology():
            logger.warning("Checkpoint topology differs from the configured model; using the checkpoint's")
        self.model = weights.to_model()
        self.adam = weights.adam_state()
        self.step = int(weights.state.get('step', 0))
        self.epoch = int(weights.state.get('epoch', 0))
        logger.info("Resumed from %s at step %d, epoch %d", path, self.step, self.epoch)
        return self

    def split(self, dataset):
        if not dataset:
            raise ParameterError("Training set is empty")
        count = self.config.val_count if len(dataset) > self.config.val_count else 0
        if count == 0:
            logger.warning("Training set too small to hold out %d validation fixtures", self.config.val_count)
            return list(dataset), []
        return list(dataset[:-count]), list(dataset[-count:])

    def patch_size(self, dataset):
        smallest = min(min(f.clean.extent) for f in dataset)
        factor = 4 * 2 ** (self.model.levels - 1)
        size = min(self.config.patch, smallest) // factor * factor
        if size < factor:
            raise DimensionError(f"Fixtures ({smallest} px) are too small for {self.model.levels} levels")
        return size

    def make_batch(self, fixtures, rng, size):
        blurry, kernels, clean = [], [], []
        for fixture in fixtures:
            top = int(rng.integers(fixture.clean.height - size + 1))
            left = int(rng.integers(fixture.clean.width - size + 1))
            kernel = fixture.kernel
            if self.config.kernel_noise > 0 and rng.random() < 0.5:
                kernel = perturb_kernel(kernel, self.config.kernel_noise, int(rng.integers(2 ** 31)))
            blurry.append(_crop(fixture.blurry, top, left, size))
            kernels.append(kernel)
            clean.append(torch.from_numpy(_crop(fixture.clean, top, left, size).data.copy()))
        return blurry, kernels, torch.stack(clean)

    def validate(self, fixtures):
        if not fixtures:
            return float('nan')
        scores = [psnr(self.model.deblur(f.blurry, f.kernel), f.clean) for f in fixtures]
        return float(np.mean(scores))

    def log_epoch(self, row):
        self.rows.append(row)
        if not self.log_path:
            return
        os.makedirs(os.path.dirname(os.path.abspath(self.log_path)), exist_ok=True)
        header = not os.path.exists(self.log_path)
        pd.DataFrame([row], columns=LOG_COLUMNS).to_csv(self.log_path, mode='a', header=header, index=False)

    def checkpoint(self):
        weights = RefinerWeights.from_model(self.model, self.adam, self.step, self.epoch)
        if self.weights_path:
            weights.save(self.weights_path)
        return weights

    def train(self, dataset):
        config = self.config
        channels = fixture_channels(dataset)
        if channels != self.model.channels:
            raise TopologyError(f"Model expects {self.model.channels}-channel images, fixtures have {channels}")
        train_set, val_set = self.split(dataset)
        size = self.patch_size(train_set)
        rng = np.random.default_rng([config.seed, self.epoch])
        params = dict(self.model.named_parameters())
        limit = config.iterations if config.iterations > 0 else math.inf
        bar = tqdm(total=None if limit == math.inf else int(limit), initial=self.step, desc="Training")

        while self.epoch < config.epochs and self.step < limit:
            lr = learning_rate(config, self.epoch)
            step_config = replace(config, lr=lr)
            order = rng.permutation(len(train_set))
            epoch_losses = []
            for start in range(0, len(order), config.batch):
                if self.step >= limit:
                    break
                batch = [train_set[i] for i in order[start:start + config.batch]]
                blurry, kernels, clean = self.make_batch(batch, rng, size)
                out = self.model(blurry, kernels)
                loss = loss_multiscale(out.images, clean, config.gamma)
                if not torch.isfinite(loss):
                    raise NumericError(f"Loss became {float(loss)} at step {self.step}; "
                                       f"last checkpoint kept at {self.weights_path}")
                grads = backward(loss, self.model)
                adam_step(params, grads, self.adam, self.step + 1, step_config)
                self.step += 1
                epoch_losses.append(float(loss))
                self.losses.append(float(loss))
                bar.update(1)
                bar.set_postfix(loss=f"{float(loss):.4f}", lr=f"{lr:.2e}")
            self.epoch += 1
            self.log_epoch({'iteration': self.step, 'lr': lr,
                            'train_loss': float(np.mean(epoch_losses)) if epoch_losses else float('nan'),
                            'val_psnr': self.validate(val_set)})
            if self.epoch % config.checkpoint_every == 0:
                self.checkpoint()
        bar.close()
        return self.checkpoint()

    def generate_report(self):
        print("\n" + "=" * 50)
        print("TRAINING SUMMARY")
        print("=" * 50)
        print(f"Steps: {self.step}  Epochs: {self.epoch}")
        if self.losses:
            print(f"Initial loss: {self.losses[0]:.5f}")
            print(f"Final loss: {self.losses[-1]:.5f}")
        if self.rows:
            print(f"Final validation PSNR: {self.rows[-1]['val_psnr']:.2f} dB")
        if self.weights_path:
            print(f"Weights: {self.weights_path}")


def train_loop(dataset, config, model=None, weights_path=None, log_path=None, **model_options):
    """Functional form of Trainer.train; builds a seeded DeblurModel when none is given."""
    if model is None:
        torch.manual_seed(config.seed)
        model = DeblurModel(levels=len(config.gamma), **model_options)
    trainer = Trainer(model, config, weights_path, log_path)
    return trainer.train(dataset), trainer
