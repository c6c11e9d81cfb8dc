import os
from dotenv import load_dotenv, dotenv_values

from scripts.exceptions import ConfigError

# Load environment variables from .env
load_dotenv()

ENV_PREFIX = 'DWDN_'

# Every entry: key -> (default, type, description)

# Deconvolution pipeline
PIPELINE_CONFIG = {
    'boundary': ('replicate_pad_crop', str, "circular | replicate_pad_crop (pad by kernel radius, edge-taper, FFT, crop)"),
    'bank': ('learned', str, "intensity | gradient | intensity+gradient | learned"),
    'levels': (2, int, "number of pyramid scales L used by the refiner"),
    'features': (16, int, "feature count M of the learned extractor"),
    'peak': (1.0, float, "peak value used by PSNR/SSIM"),
}

# Wiener statistics
STATS_CONFIG = {
    'stats.squared_sx': (False, bool, "use std^2 instead of std for the signal power s_x"),
    'stats.snr_ratio': (None, float, "fixed s_n/s_x ratio overriding the estimated statistics"),
    'stats.mean_filter': (3, int, "box size of the mean filter used to estimate s_n"),
    'wiener.eps': (1e-12, float, "denominator floor of the Wiener response"),
}

# Refiner network
REFINER_CONFIG = {
    'refiner.kind': ('encoder_decoder', str, "encoder_decoder | basic"),
    'refiner.hidden': (16, int, "width of the hidden features passed to the next scale"),
    'refiner.activation': ('leaky_relu', str, "leaky_relu | relu | identity"),
}

# Training schedule (desk-scale defaults)
TRAIN_CONFIG = {
    'train.lr': (1e-3, float, "initial Adam learning rate"),
    'train.lr_halve_every': (200, int, "epochs between learning-rate halvings"),
    'train.batch': (4, int, "batch size"),
    'train.epochs': (1000, int, "maximum number of epochs"),
    'train.iterations': (2000, int, "maximum number of optimizer steps (0 = epochs only)"),
    'train.gamma': ('1,1', str, "per-scale loss weights, comma separated, one per level"),
    'train.patch': (64, int, "random-crop size of training patches"),
    'train.checkpoint_every': (10, int, "epochs between checkpoints"),
    'train.kernel_noise': (0.0, float, "relative tap noise applied to half of the training kernels"),
    'train.val_count': (4, int, "fixtures held out for validation PSNR"),
}

# Fixture synthesis
SYNTH_CONFIG = {
    'synth.count': (20, int, "number of fixtures to synthesize"),
    'synth.patch': (64, int, "crop size of the clean patches"),
    'synth.kernel_min': (13, int, "smallest kernel side length"),
    'synth.kernel_max': (27, int, "largest kernel side length"),
    'synth.noise_min': (0.0, float, "smallest noise sigma (fraction of peak)"),
    'synth.noise_max': (0.05, float, "largest noise sigma (fraction of peak)"),
    'synth.steps': (64, int, "trajectory steps of the kernel generator"),
    'synth.anxiety': (0.3, float, "direction perturbation per trajectory step (radians)"),
    'synth.smooth': (0.3, float, "Gaussian smoothing sigma of generated kernels (0 = none)"),
}

# Evaluation
EVAL_CONFIG = {
    'eval.kernel_buckets': ('13-19,20-32,33-39,40-52,53-59,60-101', str, "kernel-size buckets of the metrics table"),
    'eval.noise_decimals': (3, int, "rounding of sigma when grouping by noise level"),
}

# Runtime
RUNTIME_CONFIG = {
    'seed': (0, int, "seed every random stream derives from"),
    'threads': (1, int, "worker threads for synthesis/evaluation and torch"),
}

# File Paths
DATA_PATHS = {
    'paths.fixtures': ('data/fixtures', str, "fixture set directory"),
    'paths.weights': ('data/models/dwdn.bin', str, "weights/checkpoint file"),
    'paths.metrics': ('data/metrics/train_log.csv', str, "append-only training log"),
}

DEFAULTS = {
    **PIPELINE_CONFIG, **STATS_CONFIG, **REFINER_CONFIG, **TRAIN_CONFIG,
    **SYNTH_CONFIG, **EVAL_CONFIG, **RUNTIME_CONFIG, **DATA_PATHS,
}


def env_name(key):
    """Environment variable overriding a config key."""
    return ENV_PREFIX + key.upper().replace('.', '_').replace('-', '_')


def _cast(key, raw, kind):
    if raw is None:
        return None
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if text == '' or text.lower() == 'none':
        return None
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"Invalid value for '{key}': {raw!r} (expected {kind.__name__})") from None


class CliConfig:
    """Key=value configuration with documented defaults.

    Precedence: default < environment (DWDN_<KEY>) < config file < explicit overrides.
    """

    def __init__(self, values=None, path=None):
        self.path = path
        self.values = {key: default for key, (default, _, _) in DEFAULTS.items()}
        for key, (_, kind, _) in DEFAULTS.items():
            raw = os.getenv(env_name(key))
            if raw is not None:
                self.values[key] = _cast(key, raw, kind)
        if values:
            self.update(values)

    @classmethod
    def from_file(cls, path=None):
        """Load a key=value file; unknown keys are rejected."""
        if path is None:
            return cls()
        if not os.path.exists(path):
            raise FileNotFoundError(f"Config file not found: {path}")
        return cls(dotenv_values(path), path=path)

    def update(self, values):
        for key, raw in values.items():
            if key not in DEFAULTS:
                raise ConfigError(f"Unknown config key: '{key}'")
            self.values[key] = _cast(key, raw, DEFAULTS[key][1])
        return self

    def override(self, **flags):
        """Apply CLI flags; keyword names use '__' for '.' and skip None values."""
        values = {name.replace('__', '.'): value for name, value in flags.items() if value is not None}
        return self.update(values)

    def __getitem__(self, key):
        if key not in self.values:
            raise ConfigError(f"Unknown config key: '{key}'")
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def gamma(self):
        """Per-scale loss weights as floats."""
        try:
            return [float(g) for g in str(self['train.gamma']).split(',') if g.strip()]
        except ValueError:
            raise ConfigError(f"Invalid train.gamma: {self['train.gamma']!r}") from None

    def kernel_buckets(self):
        """Kernel-size buckets as (low, high) pairs."""
        buckets = []
        for item in str(self['eval.kernel_buckets']).split(','):
            try:
                low, high = (int(v) for v in item.split('-'))
            except ValueError:
                raise ConfigError(f"Invalid kernel bucket: {item!r}") from None
            buckets.append((low, high))
        return buckets

    @staticmethod
    def describe():
        """Lines of 'key = default  # description' for every known key."""
        return [f"{key} = {default}  # {doc}" for key, (default, _, doc) in DEFAULTS.items()]
