"""Metrics over fixture sets and the ablation grid."""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from scripts.blur_sim import perturb_kernel
from scripts.data_loader import fixture_channels, save_table
from scripts.exceptions import InputError, ParameterError
from scripts.image_core import psnr, ssim
from scripts.refine import DeblurModel
from scripts.train import RefinerWeights, Trainer
from scripts.wiener_core import wiener_image

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ['method', 'fixture', 'sigma', 'noise', 'kernel_size', 'bucket', 'psnr', 'ssim']
DEFAULT_BUCKETS = ((13, 19), (20, 32), (33, 39), (40, 52), (53, 59), (60, 101))
ABLATION_BANKS = ('intensity', 'gradient', 'intensity+gradient', 'learned')


def bucket_label(size, buckets=DEFAULT_BUCKETS):
    for low, high in buckets:
        if low <= size <= high:
            return f"{low}-{high}"
    return 'other'


class Evaluator:
    """Scores deblurring methods on a fixture set.

    Methods: 'blurry' (the observation itself), 'wiener' (image-space Wiener) and
    'model:<weights path>' (a trained DeblurModel).
    """

    def __init__(self, fixtures, boundary='replicate_pad_crop', ratio=None, peak=1.0,
                 buckets=DEFAULT_BUCKETS, noise_decimals=3, threads=1):
        if not fixtures:
            raise InputError("No fixtures to evaluate")
        self.fixtures = fixtures
        self.boundary = boundary
        self.ratio = ratio
        self.peak = peak
        self.buckets = buckets
        self.noise_decimals = noise_decimals
        self.threads = max(1, threads)
        self.results = pd.DataFrame(columns=RESULT_COLUMNS)

    def resolve(self, method):
        """Map a method name to a callable (blurry, kernel) -> estimate."""
        if method == 'blurry':
            return lambda y, k: y
        if method == 'wiener':
            return lambda y, k: wiener_image(y, k, self.ratio, self.boundary)
        if method.startswith('model:'):
            model = RefinerWeights.load(method[len('model:'):]).to_model()
            model.eval()
            return model.deblur
        raise ParameterError(f"Unknown method '{method}', expected blurry, wiener or model:<weights>")

    def score(self, method, fn, fixture):
        estimate = fn(fixture.blurry, fixture.kernel)
        size = max(fixture.kernel.shape)
        return {
            'method': method,
            'fixture': fixture.name,
            'sigma': fixture.sigma,
            'noise': round(fixture.sigma, self.noise_decimals),
            'kernel_size': size,
            'bucket': bucket_label(size, self.buckets),
            'psnr': psnr(estimate, fixture.clean, self.peak),
            'ssim': ssim(estimate, fixture.clean, self.peak),
        }

    def evaluate(self, method):
        fn = self.resolve(method)
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            rows = list(tqdm(pool.map(lambda f: self.score(method, fn, f), self.fixtures),
                             total=len(self.fixtures), desc=f"Evaluating {method}"))
        return pd.DataFrame(rows, columns=RESULT_COLUMNS)

    def run(self, methods):
        frames = [self.evaluate(m) for m in methods]
        self.results = pd.concat(frames, ignore_index=True)
        return self.results

    def summary(self, results=None):
        """Mean PSNR/SSIM per method, grouped by noise level and kernel bucket, plus an overall row."""
        results = self.results if results is None else results
        grouped = (results.groupby(['method', 'noise', 'bucket'], sort=True)[['psnr', 'ssim']]
                   .mean().reset_index())
        overall = results.groupby('method', sort=True)[['psnr', 'ssim']].mean().reset_index()
        overall['noise'] = 'all'
        overall['bucket'] = 'all'
        return pd.concat([grouped, overall[grouped.columns]], ignore_index=True)

    def save(self, path):
        """Per-image rows to `path`, grouped means to `<stem>_summary.csv` next to it."""
        if self.results.empty:
            raise InputError("No results to save")
        stem, ext = os.path.splitext(path)
        summary_path = f"{stem}_summary{ext or '.csv'}"
        save_table(self.results, path)
        save_table(self.summary(), summary_path)
        return path, summary_path

    def generate_report(self):
        print("\n" + "=" * 50)
        print("EVALUATION")
        print("=" * 50)
        print(self.results.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
        print("\nMeans by noise level and kernel size:")
        print(self.summary().to_string(index=False, float_format=lambda v: f"{v:.4f}"))


@dataclass
class Violation:
    check: str
    detail: str
    hard: bool = False


def arm_name(bank, use_wiener, levels):
    return f"{bank}|{'wiener' if use_wiener else 'no-wiener'}|L{levels}"


class AblationRunner:
    """Trains and scores every arm of bank x Wiener on/off x levels.

    Arm weights found under `weights_dir` (named after the arm) are reused instead of
    retrained; freshly trained arms are written there.
    """

    def __init__(self, train_fixtures, test_fixtures, train_config, banks=ABLATION_BANKS,
                 wiener=(True, False), levels=(1, 2), weights_dir=None, boundary='replicate_pad_crop',
                 model_options=None):
        if not train_fixtures or not test_fixtures:
            raise InputError("Ablation needs non-empty training and test sets")
        self.train_fixtures = train_fixtures
        self.test_fixtures = test_fixtures
        self.train_config = train_config
        self.banks = banks
        self.wiener = wiener
        self.levels = levels
        self.weights_dir = weights_dir
        self.boundary = boundary
        self.model_options = model_options or {}
        self.channels = fixture_channels(train_fixtures)
        if fixture_channels(test_fixtures) != self.channels:
            raise InputError(f"Training fixtures have {self.channels} channels, test fixtures "
                             f"{fixture_channels(test_fixtures)}")
        self.table = pd.DataFrame()
        self.violations = []

    def arms(self):
        return [(b, w, l) for b in self.banks for w in self.wiener for l in self.levels]

    def arm_path(self, name):
        if not self.weights_dir:
            return None
        return os.path.join(self.weights_dir, name.replace('|', '_').replace('+', 'p') + '.bin')

    def fit_arm(self, bank, use_wiener, levels):
        name = arm_name(bank, use_wiener, levels)
        path = self.arm_path(name)
        if path and os.path.exists(path):
            logger.info("Reusing weights for arm %s from %s", name, path)
            return RefinerWeights.load(path).to_model()
        torch.manual_seed(self.train_config.seed)
        model = DeblurModel(bank=bank, channels=self.channels, levels=levels, use_wiener=use_wiener,
                            boundary=self.boundary, **self.model_options)
        gamma = self.train_config.gamma
        if len(gamma) != levels:
            gamma = (1.0,) * levels
        config = replace(self.train_config, gamma=gamma)
        trainer = Trainer(model, config, weights_path=path)
        trainer.train(self.train_fixtures)
        return trainer.model

    def run(self):
        rows = []
        for bank, use_wiener, levels in self.arms():
            model = self.fit_arm(bank, use_wiener, levels)
            model.eval()
            scores = []
            for f in self.test_fixtures:
                estimate = model.deblur(f.blurry, f.kernel)
                scores.append((psnr(estimate, f.clean), ssim(estimate, f.clean)))
            rows.append({
                'arm': arm_name(bank, use_wiener, levels), 'bank': bank, 'wiener': use_wiener,
                'levels': levels, 'psnr': float(np.mean([s[0] for s in scores])),
                'ssim': float(np.mean([s[1] for s in scores])),
            })
        self.table = pd.DataFrame(rows, columns=['arm', 'bank', 'wiener', 'levels', 'psnr', 'ssim'])
        self.violations = check_orderings(self.table)
        return self.table

    def generate_report(self):
        print("\n" + "=" * 50)
        print("ABLATION")
        print("=" * 50)
        print(self.table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
        if not self.violations:
            print("\nAll expected orderings hold.")
            return
        print("\nOrdering violations:")
        for v in self.violations:
            print(f"  [{'HARD' if v.hard else 'soft'}] {v.check}: {v.detail}")


def _score(table, bank, use_wiener, levels):
    rows = table[(table['bank'] == bank) & (table['wiener'] == use_wiener) & (table['levels'] == levels)]
    return None if rows.empty else float(rows['psnr'].iloc[0])


def check_orderings(table, slack=0.05):
    """Expected orderings: gradient < intensity < intensity+gradient, without Wiener <
    with Wiener (the only hard check), and L=1 <= L=2 + slack. Missing arms are skipped."""
    violations = []
    finest = int(table['levels'].max()) if not table.empty else 2
    chain = [b for b in ('gradient', 'intensity', 'intensity+gradient') if _score(table, b, True, finest) is not None]
    for low, high in zip(chain, chain[1:]):
        a, b = _score(table, low, True, finest), _score(table, high, True, finest)
        if not a < b:
            violations.append(Violation('bank order', f"{low} ({a:.2f} dB) >= {high} ({b:.2f} dB)"))
    for bank in table['bank'].unique() if not table.empty else []:
        with_w, without_w = _score(table, bank, True, finest), _score(table, bank, False, finest)
        if with_w is not None and without_w is not None and not without_w < with_w:
            violations.append(Violation('wiener', f"{bank}: without Wiener {without_w:.2f} dB >= "
                                                  f"with Wiener {with_w:.2f} dB", hard=True))
        single, multi = _score(table, bank, True, 1), _score(table, bank, True, 2)
        if single is not None and multi is not None and single > multi + slack:
            violations.append(Violation('multi-scale', f"{bank}: L=1 {single:.2f} dB > L=2 {multi:.2f} dB + {slack}"))
    return violations


def robustness_check(fixtures, deblur, rel_sigma=0.05, seed=0, peak=1.0):
    """Mean PSNR with exact and perturbed kernels; `deblur(y, k)` returns an Image."""
    if not fixtures:
        raise InputError("No fixtures for the robustness check")
    exact, perturbed, finite = [], [], True
    for index, f in enumerate(fixtures):
        exact.append(psnr(deblur(f.blurry, f.kernel), f.clean, peak))
        noisy = deblur(f.blurry, perturb_kernel(f.kernel, rel_sigma, seed + index))
        finite = finite and bool(np.all(np.isfinite(noisy.data)))
        perturbed.append(psnr(noisy, f.clean, peak))
    result = {'exact_psnr': float(np.mean(exact)), 'perturbed_psnr': float(np.mean(perturbed)), 'finite': finite}
    result['drop'] = result['exact_psnr'] - result['perturbed_psnr']
    logger.info("Robustness: %.2f dB exact, %.2f dB perturbed", result['exact_psnr'], result['perturbed_psnr'])
    return result
