# cli.py
"""Command-line surface: synth, deblur, train, eval, ablate.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or configuration error.
"""
import argparse
import logging
import sys

import torch

from scripts.blur_sim import DatasetSynthesizer
from scripts.config import CliConfig
from scripts.data_loader import FixtureLoader, fixture_channels, read_image, read_kernel, save_table, write_image
from scripts.evaluation import AblationRunner, Evaluator
from scripts.exceptions import ConfigError, DeblurError
from scripts.filter_bank import builtin_bank, normalize_kind
from scripts.image_core import psnr, ssim
from scripts.plot import AblationPlotter, TrainingPlotter
from scripts.refine import DeblurModel, deblur_pipeline
from scripts.train import RefinerWeights, TrainConfig, Trainer

logger = logging.getLogger(__name__)


def parse_range(text, kind=float):
    """'lo..hi' (or a single value) -> (lo, hi)."""
    parts = text.split('..')
    try:
        values = [kind(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid range '{text}', expected lo..hi") from None
    if len(values) == 1:
        values = values * 2
    if len(values) != 2 or values[0] > values[1]:
        raise argparse.ArgumentTypeError(f"invalid range '{text}', expected lo..hi")
    return tuple(values)


def int_range(text):
    return parse_range(text, int)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="key=value configuration file")
    common.add_argument('--seed', type=int, help="seed every random stream derives from")
    common.add_argument('--threads', type=int, help="worker threads")
    common.add_argument('--verbose', action='store_true', help="debug logging on stderr")

    parser = argparse.ArgumentParser(prog='dwdn', description="Feature-space Wiener deconvolution")
    sub = parser.add_subparsers(dest='command', required=True)

    synth = sub.add_parser('synth', parents=[common], help="synthesize a fixture set")
    synth.add_argument('--src', required=True, help="directory of clean images")
    synth.add_argument('--out', help="fixture directory (default paths.fixtures)")
    synth.add_argument('--count', type=int)
    synth.add_argument('--patch', type=int)
    synth.add_argument('--kernel', type=int_range, help="kernel size range, e.g. 13..27")
    synth.add_argument('--noise', type=parse_range, help="noise sigma range, e.g. 0.01..0.05")
    synth.add_argument('--boundary', choices=['circular', 'replicate_pad_crop'])

    deblur = sub.add_parser('deblur', parents=[common], help="deblur one image")
    deblur.add_argument('--image', required=True)
    deblur.add_argument('--kernel', required=True)
    deblur.add_argument('--out', required=True)
    deblur.add_argument('--bank', help="intensity | gradient | intensity+gradient | learned")
    deblur.add_argument('--weights', help="trained weights (required for --bank learned)")
    deblur.add_argument('--levels', type=int)
    deblur.add_argument('--no-refine', action='store_true', help="stop after the Wiener step (implied for fixed banks without --weights)")
    deblur.add_argument('--snr-ratio', type=float, help="fixed s_n/s_x ratio")
    deblur.add_argument('--boundary', choices=['circular', 'replicate_pad_crop'])
    deblur.add_argument('--gt', help="ground truth image; prints PSNR/SSIM")
    deblur.add_argument('--bits', type=int, choices=[8, 16], default=8)

    train = sub.add_parser('train', parents=[common], help="train a model on a fixture set")
    train.add_argument('--fixtures')
    train.add_argument('--weights', help="output weights/checkpoint file")
    train.add_argument('--log', help="metrics CSV (append-only)")
    train.add_argument('--resume', help="checkpoint to resume from")
    train.add_argument('--bank')
    train.add_argument('--levels', type=int)
    train.add_argument('--no-wiener', action='store_true')
    train.add_argument('--iterations', type=int)
    train.add_argument('--epochs', type=int)
    train.add_argument('--lr', type=float)
    train.add_argument('--batch', type=int)
    train.add_argument('--plot', help="write the loss curve to this image file")

    evaluate = sub.add_parser('eval', parents=[common], help="score methods on a fixture set")
    evaluate.add_argument('--fixtures')
    evaluate.add_argument('--method', action='append',
                          help="blurry | wiener | model:<weights>; repeatable (default blurry, wiener)")
    evaluate.add_argument('--out', help="per-image CSV; grouped means go to <out>_summary.csv")
    evaluate.add_argument('--snr-ratio', type=float)

    ablate = sub.add_parser('ablate', parents=[common], help="run the ablation grid")
    ablate.add_argument('--train-fixtures', required=True)
    ablate.add_argument('--fixtures', help="held-out fixtures (default paths.fixtures)")
    ablate.add_argument('--banks', help="comma-separated subset of banks")
    ablate.add_argument('--weights-dir', help="reuse/store per-arm weights here")
    ablate.add_argument('--iterations', type=int)
    ablate.add_argument('--out', help="ablation table CSV")
    ablate.add_argument('--plot', help="write the arm chart to this image file")
    ablate.add_argument('--strict', action='store_true', help="fail when the Wiener ordering is violated")
    return parser


def load_config(args):
    config = CliConfig.from_file(args.config)
    config.override(seed=args.seed, threads=args.threads)
    torch.manual_seed(config['seed'])
    torch.set_num_threads(max(1, config['threads']))
    return config


def cmd_synth(args, config):
    config.override(synth__count=args.count, synth__patch=args.patch, boundary=args.boundary)
    if args.kernel:
        config.override(synth__kernel_min=args.kernel[0], synth__kernel_max=args.kernel[1])
    if args.noise:
        config.override(synth__noise_min=args.noise[0], synth__noise_max=args.noise[1])
    synthesizer = DatasetSynthesizer(
        args.src, patch=config['synth.patch'],
        kernel_range=(config['synth.kernel_min'], config['synth.kernel_max']),
        noise_range=(config['synth.noise_min'], config['synth.noise_max']),
        boundary=config['boundary'], steps=config['synth.steps'], anxiety=config['synth.anxiety'],
        smooth=config['synth.smooth'], threads=config['threads'])
    fixtures = synthesizer.make_dataset(config['synth.count'], config['seed'])
    FixtureLoader().save(args.out or config['paths.fixtures'], fixtures)
    synthesizer.generate_report()
    return 0


def cmd_deblur(args, config):
    """With --weights the model's own boundary, statistics and Wiener setting apply, and only
    explicit --boundary / --snr-ratio / --levels flags override them. Fixed banks without
    weights stop after the Wiener step."""
    config.override(bank=args.bank, levels=args.levels, boundary=args.boundary, stats__snr_ratio=args.snr_ratio)
    y = read_image(args.image)
    k = read_kernel(args.kernel)
    if args.weights:
        model = RefinerWeights.load(args.weights).to_model()
        if args.bank and normalize_kind(args.bank) != model.kind:
            raise ConfigError(f"--bank {args.bank} does not match the {model.kind} bank in {args.weights}")
        if args.boundary:
            model.boundary = args.boundary
        if args.snr_ratio is not None:
            model.stats_options['ratio'] = args.snr_ratio
        if args.levels:
            model.levels = args.levels
        model.eval()
        if args.no_refine:
            out = deblur_pipeline(y, k, model.bank, None, model.levels, model.boundary,
                                  eps=model.eps, **model.stats_options)
        else:
            out = model.deblur(y, k)
    else:
        kind = normalize_kind(config['bank'])
        if kind == 'learned':
            raise ConfigError("--bank learned requires --weights")
        if not args.no_refine:
            logger.info("No --weights given; stopping after the Wiener step")
        options = {'ratio': config['stats.snr_ratio'], 'mean_filter': config['stats.mean_filter'],
                   'squared_sx': config['stats.squared_sx'], 'eps': config['wiener.eps']}
        out = deblur_pipeline(y, k, builtin_bank(kind), None, config['levels'], config['boundary'], **options)
    write_image(out, args.out, bits=args.bits)
    print(f"Wrote {args.out}")
    if args.gt:
        gt = read_image(args.gt)
        print(f"PSNR: {psnr(out, gt, config['peak']):.4f} dB")
        print(f"SSIM: {ssim(out, gt, config['peak']):.4f}")
    return 0


def cmd_train(args, config):
    config.override(bank=args.bank, levels=args.levels, train__iterations=args.iterations,
                    train__epochs=args.epochs, train__lr=args.lr, train__batch=args.batch)
    fixtures = FixtureLoader(args.fixtures or config['paths.fixtures']).load()
    train_config = TrainConfig.from_cli(config)
    if len(train_config.gamma) != config['levels']:
        raise ConfigError(f"train.gamma holds {len(train_config.gamma)} weights but levels is {config['levels']}")
    model = DeblurModel(bank=config['bank'], channels=fixture_channels(fixtures), levels=config['levels'],
                        features=config['features'],
                        refiner=config['refiner.kind'], hidden=config['refiner.hidden'],
                        activation=config['refiner.activation'], use_wiener=not args.no_wiener,
                        boundary=config['boundary'], ratio=config['stats.snr_ratio'],
                        mean_filter=config['stats.mean_filter'], squared_sx=config['stats.squared_sx'],
                        eps=config['wiener.eps'])
    log_path = args.log or config['paths.metrics']
    trainer = Trainer(model, train_config, args.weights or config['paths.weights'], log_path)
    if args.resume:
        trainer.resume(args.resume)
    trainer.train(fixtures)
    trainer.generate_report()
    if args.plot:
        TrainingPlotter(log_path).plot_loss_curve(args.plot)
    return 0


def cmd_eval(args, config):
    config.override(stats__snr_ratio=args.snr_ratio)
    fixtures = FixtureLoader(args.fixtures or config['paths.fixtures']).load(require_clean=True)
    evaluator = Evaluator(fixtures, boundary=config['boundary'], ratio=config['stats.snr_ratio'],
                          peak=config['peak'], buckets=config.kernel_buckets(),
                          noise_decimals=config['eval.noise_decimals'], threads=config['threads'])
    evaluator.run(args.method or ['blurry', 'wiener'])
    if args.out:
        evaluator.save(args.out)
    evaluator.generate_report()
    return 0


def cmd_ablate(args, config):
    config.override(train__iterations=args.iterations)
    train_fixtures = FixtureLoader(args.train_fixtures).load()
    test_fixtures = FixtureLoader(args.fixtures or config['paths.fixtures']).load()
    banks = tuple(normalize_kind(b.strip()) for b in args.banks.split(',')) if args.banks else None
    runner = AblationRunner(train_fixtures, test_fixtures, TrainConfig.from_cli(config),
                            weights_dir=args.weights_dir, boundary=config['boundary'],
                            model_options={'features': config['features'], 'refiner': config['refiner.kind'],
                                           'hidden': config['refiner.hidden']},
                            **({'banks': banks} if banks else {}))
    table = runner.run()
    if args.out:
        save_table(table, args.out)
    runner.generate_report()
    if args.plot:
        AblationPlotter(table).plot_arms(args.plot)
    hard = [v for v in runner.violations if v.hard]
    if args.strict and hard:
        print(f"Strict mode: {len(hard)} Wiener ordering violation(s)", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    'synth': cmd_synth,
    'deblur': cmd_deblur,
    'train': cmd_train,
    'eval': cmd_eval,
    'ablate': cmd_ablate,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format='%(levelname)s %(name)s: %(message)s')
    try:
        config = load_config(args)
        return COMMANDS[args.command](args, config)
    except ConfigError as e:
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return 2
    except (DeblurError, OSError) as e:
        print(f"{parser.prog} {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
