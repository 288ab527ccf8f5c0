#!/usr/bin/env python3

import argparse
import configparser
import logging
import os
import sys
from pathlib import Path

import numpy as np

from dualnet import DenoiserConfig
from errors import EXIT_IO, EXIT_OK, ConfigurationError, GeoCompleteError, IngestionError
from geometry import load_point_cloud, project, save_point_cloud
from masking import MaskingConfig, RectMaskParams, reference_sample, target_sample
from metrics import evaluate_completion
from pipeline import ABLATIONS, ROBUST_KINDS, InferConfig, RobustnessGrid, TrainConfig, ablation_run, configure_determinism, copy_cloud_baseline, infer, precompute_geometry, robustness_run, summarize_ablation, train_scene, write_ablation_csv, write_robustness_csv
from scene_forge import generate_scene, list_presets, load_image, load_scene, save_image, save_mask, save_scene, scene_config_from_preset

logging.basicConfig(
    format='%(asctime)s %(levelname)s %(message)s',
    level=os.environ.get('LOG', 'INFO')
)
log = logging.getLogger('geocomplete')

CONFIG_FILE_NAME = "geocomplete.ini"

CONFIG_SECTION_SCENE = "scene"
CONFIG_PRESET = "preset"
CONFIG_PRESET_DEFAULT = "planar3"

CONFIG_SECTION_MASKING = "masking"
CONFIG_MIN_RECTS = "min_rects"
CONFIG_MIN_RECTS_DEFAULT = 1
CONFIG_MAX_RECTS = "max_rects"
CONFIG_MAX_RECTS_DEFAULT = 4
CONFIG_MIN_SIDE = "min_side"
CONFIG_MIN_SIDE_DEFAULT = 0.2
CONFIG_MAX_SIDE = "max_side"
CONFIG_MAX_SIDE_DEFAULT = 0.6
CONFIG_RECT_MODE = "rect_mode"
CONFIG_RECT_MODE_DEFAULT = "mixed"
CONFIG_V_FILL = "v_fill"
CONFIG_V_FILL_DEFAULT = 1.0
CONFIG_TARGET_PROBABILITY = "target_probability"
CONFIG_TARGET_PROBABILITY_DEFAULT = "uniform"
CONFIG_TARGET_AWARE = "target_aware"
CONFIG_TARGET_AWARE_DEFAULT = True
CONFIG_CLOUD_MASKING = "cloud_masking"
CONFIG_CLOUD_MASKING_DEFAULT = True

CONFIG_SECTION_MODEL = "model"
CONFIG_PATCH = "patch"
CONFIG_PATCH_DEFAULT = 4
CONFIG_HIDDEN = "hidden"
CONFIG_HIDDEN_DEFAULT = 128
CONFIG_BLOCKS = "blocks"
CONFIG_BLOCKS_DEFAULT = 4
CONFIG_HEADS = "heads"
CONFIG_HEADS_DEFAULT = 4
CONFIG_ATTENTION = "attention"
CONFIG_ATTENTION_DEFAULT = "masked"
CONFIG_DUAL_BRANCH = "dual_branch"
CONFIG_DUAL_BRANCH_DEFAULT = True
CONFIG_SHARE_WEIGHTS = "share_weights"
CONFIG_SHARE_WEIGHTS_DEFAULT = True
CONFIG_TIMESTEPS = "timesteps"
CONFIG_TIMESTEPS_DEFAULT = 200

CONFIG_SECTION_TRAIN = "train"
CONFIG_ITERATIONS = "iterations"
CONFIG_ITERATIONS_DEFAULT = 1000
CONFIG_BATCH_SIZE = "batch_size"
CONFIG_BATCH_SIZE_DEFAULT = 8
CONFIG_LEARNING_RATE = "learning_rate"
CONFIG_LEARNING_RATE_DEFAULT = 1e-4
CONFIG_CHECKPOINT_EVERY = "checkpoint_every"
CONFIG_CHECKPOINT_EVERY_DEFAULT = 0
CONFIG_LOG_EVERY = "log_every"
CONFIG_LOG_EVERY_DEFAULT = 50

CONFIG_SECTION_INFER = "infer"
CONFIG_STEPS = "steps"
CONFIG_STEPS_DEFAULT = 50
CONFIG_SAMPLER = "sampler"
CONFIG_SAMPLER_DEFAULT = "ancestral"
CONFIG_COMPOSITE = "composite"
CONFIG_COMPOSITE_DEFAULT = True

CONFIG_SECTION_ROBUST = "robust"
CONFIG_KIND = "kind"
CONFIG_KIND_DEFAULT = "noise"
CONFIG_LEVELS = "levels"
CONFIG_LEVELS_DEFAULT = "0,0.25,0.5,0.75"
CONFIG_SEEDS = "seeds"
CONFIG_SEEDS_DEFAULT = "0"
CONFIG_NOISE_SCALE = "noise_scale"
CONFIG_NOISE_SCALE_DEFAULT = 0.02
CONFIG_RETRAIN = "retrain"
CONFIG_RETRAIN_DEFAULT = True

config = configparser.ConfigParser()


def parse_value_from_config(value):
    if value == '0':
        return False
    elif value == '1':
        return True
    else:
        return value


def parse_value_to_config(value):
    if value is True:
        return '1'
    elif value is False:
        return '0'
    else:
        return str(value)


def config_get(section, key, key_default):
    """Typed value of ``[section] key``; a missing key is filled in with its default."""
    try:
        value = parse_value_from_config(config.get(section, key))
    except (configparser.NoSectionError, configparser.NoOptionError):
        if not config.has_section(section):
            config.add_section(section)
        config.set(section, key, parse_value_to_config(key_default))
        return key_default

    if isinstance(key_default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError("[{}] {} must be 0 or 1, got {!r}".format(section, key, value))
        return value
    if isinstance(value, bool):
        value = parse_value_to_config(value)
    try:
        return type(key_default)(value)
    except ValueError:
        raise ConfigurationError("[{}] {} must be a {}, got {!r}".format(section, key, type(key_default).__name__, value))


def config_set(section, key, value):
    if not config.has_section(section):
        config.add_section(section)
    config.set(section, key, parse_value_to_config(value))


def config_load(path):
    config.clear()
    if path is None:
        return
    if not os.path.isfile(path):
        raise IngestionError(path, "config file does not exist")
    try:
        config.read(path)
    except configparser.Error as e:
        raise IngestionError(path, "malformed config ({})".format(e.__class__.__name__))
    log.debug('Config loaded from \"%s\"', path)


def config_save(out_dir):
    path = Path(out_dir) / CONFIG_FILE_NAME
    with open(path, 'w') as config_file:
        config.write(config_file)
    log.debug('Effective config written to \"%s\"', path)


def parse_list(text, cast, name):
    try:
        values = tuple(cast(item) for item in str(text).split(',') if item.strip())
    except ValueError:
        raise ConfigurationError("{} must be a comma separated list, got {!r}".format(name, text))
    if not values:
        raise ConfigurationError("{} must not be empty".format(name))
    return values


def masking_config():
    rect = RectMaskParams(
        min_count=config_get(CONFIG_SECTION_MASKING, CONFIG_MIN_RECTS, CONFIG_MIN_RECTS_DEFAULT),
        max_count=config_get(CONFIG_SECTION_MASKING, CONFIG_MAX_RECTS, CONFIG_MAX_RECTS_DEFAULT),
        min_side=config_get(CONFIG_SECTION_MASKING, CONFIG_MIN_SIDE, CONFIG_MIN_SIDE_DEFAULT),
        max_side=config_get(CONFIG_SECTION_MASKING, CONFIG_MAX_SIDE, CONFIG_MAX_SIDE_DEFAULT),
        mode=config_get(CONFIG_SECTION_MASKING, CONFIG_RECT_MODE, CONFIG_RECT_MODE_DEFAULT)
    )
    target_probability = config_get(CONFIG_SECTION_MASKING, CONFIG_TARGET_PROBABILITY, CONFIG_TARGET_PROBABILITY_DEFAULT)
    if target_probability == CONFIG_TARGET_PROBABILITY_DEFAULT:
        target_probability = None
    else:
        target_probability = parse_list(target_probability, float, CONFIG_TARGET_PROBABILITY)[0]
    return MaskingConfig(
        rect=rect,
        v_fill=config_get(CONFIG_SECTION_MASKING, CONFIG_V_FILL, CONFIG_V_FILL_DEFAULT),
        target_probability=target_probability,
        target_aware=config_get(CONFIG_SECTION_MASKING, CONFIG_TARGET_AWARE, CONFIG_TARGET_AWARE_DEFAULT),
        cloud_masking=config_get(CONFIG_SECTION_MASKING, CONFIG_CLOUD_MASKING, CONFIG_CLOUD_MASKING_DEFAULT)
    )


def model_config(scene):
    height, width = scene.shape
    return DenoiserConfig(
        width=width,
        height=height,
        patch=config_get(CONFIG_SECTION_MODEL, CONFIG_PATCH, CONFIG_PATCH_DEFAULT),
        hidden=config_get(CONFIG_SECTION_MODEL, CONFIG_HIDDEN, CONFIG_HIDDEN_DEFAULT),
        blocks=config_get(CONFIG_SECTION_MODEL, CONFIG_BLOCKS, CONFIG_BLOCKS_DEFAULT),
        heads=config_get(CONFIG_SECTION_MODEL, CONFIG_HEADS, CONFIG_HEADS_DEFAULT),
        attention=config_get(CONFIG_SECTION_MODEL, CONFIG_ATTENTION, CONFIG_ATTENTION_DEFAULT),
        dual_branch=config_get(CONFIG_SECTION_MODEL, CONFIG_DUAL_BRANCH, CONFIG_DUAL_BRANCH_DEFAULT),
        share_weights=config_get(CONFIG_SECTION_MODEL, CONFIG_SHARE_WEIGHTS, CONFIG_SHARE_WEIGHTS_DEFAULT),
        timesteps=config_get(CONFIG_SECTION_MODEL, CONFIG_TIMESTEPS, CONFIG_TIMESTEPS_DEFAULT)
    )


def train_config(args):
    if args.steps is not None:
        config_set(CONFIG_SECTION_TRAIN, CONFIG_ITERATIONS, args.steps)
    return TrainConfig(
        iterations=config_get(CONFIG_SECTION_TRAIN, CONFIG_ITERATIONS, CONFIG_ITERATIONS_DEFAULT),
        batch_size=config_get(CONFIG_SECTION_TRAIN, CONFIG_BATCH_SIZE, CONFIG_BATCH_SIZE_DEFAULT),
        learning_rate=config_get(CONFIG_SECTION_TRAIN, CONFIG_LEARNING_RATE, CONFIG_LEARNING_RATE_DEFAULT),
        masking=masking_config(),
        seed=args.seed,
        checkpoint_every=config_get(CONFIG_SECTION_TRAIN, CONFIG_CHECKPOINT_EVERY, CONFIG_CHECKPOINT_EVERY_DEFAULT),
        log_every=config_get(CONFIG_SECTION_TRAIN, CONFIG_LOG_EVERY, CONFIG_LOG_EVERY_DEFAULT)
    )


def infer_config(args, steps_override=True):
    if steps_override and args.steps is not None:
        config_set(CONFIG_SECTION_INFER, CONFIG_STEPS, args.steps)
    if getattr(args, 'composite', None) is not None:
        config_set(CONFIG_SECTION_INFER, CONFIG_COMPOSITE, args.composite)
    return InferConfig(
        steps=config_get(CONFIG_SECTION_INFER, CONFIG_STEPS, CONFIG_STEPS_DEFAULT),
        sampler=config_get(CONFIG_SECTION_INFER, CONFIG_SAMPLER, CONFIG_SAMPLER_DEFAULT),
        seed=args.seed,
        composite=config_get(CONFIG_SECTION_INFER, CONFIG_COMPOSITE, CONFIG_COMPOSITE_DEFAULT)
    )


def output_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args):
    preset = args.preset or config_get(CONFIG_SECTION_SCENE, CONFIG_PRESET, CONFIG_PRESET_DEFAULT)
    cfg = scene_config_from_preset(preset)
    bundle = generate_scene(cfg, args.seed)
    out = output_dir(args)
    save_scene(bundle, out)
    print("scene {} (preset {}, seed {}): {} references, {}x{}, {} hole pixels".format(
        out, preset, args.seed, len(bundle.references), cfg.width, cfg.height, int(bundle.target.completion_mask.sum())))


def cmd_project(args):
    scene = load_scene(args.scene)
    products = precompute_geometry(scene)
    out = output_dir(args)
    save_image(out / 'target_cloud.png', products.target_cloud.image)
    save_mask(out / 'target_coverage.png', products.target_cloud.coverage.astype(np.uint8))
    for i, (projected, r) in enumerate(zip(products.reference_clouds, products.informative)):
        save_image(out / 'ref_{}_cloud.png'.format(i), projected.image)
        save_mask(out / 'ref_{}_informative.png'.format(i), r)
    save_image(out / 'copy_cloud_baseline.png', copy_cloud_baseline(scene, products))
    save_point_cloud(out / 'scene_cloud.gpcd', products.cloud)
    print("target coverage {:.1f}%, {} points".format(100 * products.target_cloud.coverage.mean(), len(products.cloud)))
    if args.cloud is not None:
        external = project(load_point_cloud(args.cloud), scene.target.camera)
        save_image(out / 'external_cloud.png', external.image)
        save_mask(out / 'external_coverage.png', external.coverage.astype(np.uint8))
        print("external cloud coverage {:.1f}%".format(100 * external.coverage.mean()))


def write_sample(out, prefix, sample):
    save_image(out / (prefix + 'cond_image.png'), sample.cond_image)
    save_mask(out / (prefix + 'image_mask.png'), sample.image_mask)
    save_image(out / (prefix + 'cond_cloud.png'), sample.cond_cloud)
    save_mask(out / (prefix + 'cloud_mask.png'), sample.cloud_mask)
    save_mask(out / (prefix + 'weight.png'), sample.weight)


def cmd_mask_debug(args):
    scene = load_scene(args.scene)
    products = precompute_geometry(scene)
    cfg = masking_config()
    if not 0 <= args.view < len(scene.references):
        raise ConfigurationError("view must be within 0..{}, got {}".format(len(scene.references) - 1, args.view))
    rng = np.random.default_rng(args.seed)
    out = output_dir(args)
    write_sample(out, 'ref_{}_'.format(args.view), reference_sample(scene, products, args.view, cfg, rng))
    save_mask(out / 'ref_{}_informative.png'.format(args.view), products.informative[args.view])
    write_sample(out, 'target_', target_sample(scene, products, cfg, rng))


def cmd_train(args):
    scene = load_scene(args.scene)
    out = output_dir(args)
    cfg = train_config(args)
    model_cfg = model_config(scene)
    config_save(out)
    result = train_scene(scene, precompute_geometry(scene), cfg, model_cfg, out)
    print("checkpoint {} after {} iterations, final loss {:.6f}".format(result.checkpoints[-1], len(result.losses), result.losses[-1]))


def cmd_infer(args):
    scene = load_scene(args.scene)
    out = output_dir(args)
    cfg = infer_config(args)
    expected = model_config(scene)
    config_save(out)
    image = infer(scene, precompute_geometry(scene), args.checkpoint, cfg, expected)
    save_image(out / 'completion.png', image)
    print(evaluate_completion(image, scene.target.image, scene.target.completion_mask, Path(args.scene).name, args.seed))


def cmd_eval(args):
    scene = load_scene(args.scene)
    image = load_image(args.image)
    report = evaluate_completion(image, scene.target.image, scene.target.completion_mask, Path(args.scene).name, args.seed)
    out = output_dir(args)
    with open(out / 'eval.csv', 'w') as f:
        f.write(report.csv_header() + '\n' + report.csv_row() + '\n')
    print(report)


def cmd_robust(args):
    scene = load_scene(args.scene)
    out = output_dir(args)
    if args.levels is not None:
        config_set(CONFIG_SECTION_ROBUST, CONFIG_LEVELS, args.levels)
    if args.kind is not None:
        config_set(CONFIG_SECTION_ROBUST, CONFIG_KIND, args.kind)
    if args.checkpoint is not None:
        config_set(CONFIG_SECTION_ROBUST, CONFIG_RETRAIN, False)
    grid = RobustnessGrid(
        kind=config_get(CONFIG_SECTION_ROBUST, CONFIG_KIND, CONFIG_KIND_DEFAULT),
        levels=parse_list(config_get(CONFIG_SECTION_ROBUST, CONFIG_LEVELS, CONFIG_LEVELS_DEFAULT), float, CONFIG_LEVELS),
        seeds=parse_list(config_get(CONFIG_SECTION_ROBUST, CONFIG_SEEDS, CONFIG_SEEDS_DEFAULT), int, CONFIG_SEEDS),
        noise_scale=config_get(CONFIG_SECTION_ROBUST, CONFIG_NOISE_SCALE, CONFIG_NOISE_SCALE_DEFAULT),
        retrain=config_get(CONFIG_SECTION_ROBUST, CONFIG_RETRAIN, CONFIG_RETRAIN_DEFAULT)
    )
    train_cfg = train_config(args)
    infer_cfg = infer_config(args, steps_override=False)
    model_cfg = model_config(scene)
    config_save(out)
    rows = robustness_run(scene, grid, model_cfg, train_cfg, infer_cfg, args.checkpoint, Path(args.scene).name)
    write_robustness_csv(out / 'robustness.csv', rows)
    for row in rows:
        delta = '' if row.delta_psnr is None else " (delta {:+.3f} dB)".format(row.delta_psnr)
        print("{} {:.2f} seed {}: PSNR {:.3f} dB, SSIM {:.4f}{}".format(row.kind, row.level, row.seed, row.psnr, row.ssim, delta))


def cmd_ablate(args):
    scenes = [(Path(path).name, load_scene(path)) for path in args.scene]
    out = output_dir(args)
    variants = parse_list(args.variants, str, 'variants')
    seeds = parse_list(args.seeds, int, 'seeds')
    train_cfg = train_config(args)
    infer_cfg = infer_config(args, steps_override=False)
    model_cfg = model_config(scenes[0][1])
    config_save(out)
    rows = ablation_run(scenes, variants, seeds, model_cfg, train_cfg, infer_cfg)
    write_ablation_csv(out / 'ablation.csv', rows)
    for variant, (mean_psnr, mean_ssim) in summarize_ablation(rows).items():
        print("{:<12} PSNR {:.3f} dB  SSIM {:.4f}".format(variant, mean_psnr, mean_ssim))


def common_options(defaults=True):
    """Global flags, accepted before or after the subcommand."""
    def default(value):
        return value if defaults else argparse.SUPPRESS

    options = argparse.ArgumentParser(add_help=False)
    options.add_argument('-v', '--verbose', action='store_true', default=default(False), help="debug logging")
    options.add_argument('--config', default=default(None), help="INI file, every flag overrides its key")
    options.add_argument('--seed', type=int, default=default(0))
    options.add_argument('--threads', type=int, default=default(1))
    return options


def build_parser():
    parser = argparse.ArgumentParser(
        prog='geocomplete', description="Geometry-conditioned reference-based image completion",
        parents=[common_options()]
    )
    commands = parser.add_subparsers(dest='command', required=True)
    # subcommand copies only set what was given, the top-level defaults stay otherwise
    shared = [common_options(defaults=False)]

    gen = commands.add_parser('gen', parents=shared, help="generate a synthetic scene")
    gen.add_argument('--preset', choices=list_presets())
    gen.set_defaults(func=cmd_gen)

    project_cmd = commands.add_parser('project', parents=shared, help="write projected clouds and informative masks")
    project_cmd.add_argument('--cloud', help="GPCD point cloud to project into the target camera")
    project_cmd.set_defaults(func=cmd_project)

    mask_debug = commands.add_parser('mask-debug', parents=shared, help="dump one sampled training example")
    mask_debug.add_argument('--view', type=int, default=0)
    mask_debug.set_defaults(func=cmd_mask_debug)

    train = commands.add_parser('train', parents=shared, help="train the denoiser on one scene")
    train.add_argument('--steps', type=int, help="training iterations")
    train.set_defaults(func=cmd_train)

    infer_cmd = commands.add_parser('infer', parents=shared, help="complete the target view")
    infer_cmd.add_argument('--checkpoint', required=True)
    infer_cmd.add_argument('--steps', type=int, help="sampler steps")
    infer_cmd.add_argument('--composite', dest='composite', action='store_true', default=None)
    infer_cmd.add_argument('--no-composite', dest='composite', action='store_false')
    infer_cmd.set_defaults(func=cmd_infer)

    eval_cmd = commands.add_parser('eval', parents=shared, help="score an image against the scene ground truth")
    eval_cmd.add_argument('--image', required=True)
    eval_cmd.set_defaults(func=cmd_eval)

    robust = commands.add_parser('robust', parents=shared, help="perturbation grid")
    robust.add_argument('--kind', choices=ROBUST_KINDS)
    robust.add_argument('--levels', help="comma separated ratios")
    robust.add_argument('--checkpoint', help="re-infer with this checkpoint instead of retraining")
    robust.add_argument('--steps', type=int, help="training iterations per cell")
    robust.set_defaults(func=cmd_robust)

    ablate = commands.add_parser('ablate', parents=shared, help="ablation table over scenes and seeds")
    ablate.add_argument('--variants', default=','.join(ABLATIONS))
    ablate.add_argument('--seeds', default='0,1,2')
    ablate.add_argument('--steps', type=int, help="training iterations per run")
    ablate.set_defaults(func=cmd_ablate)

    for name, sub in commands.choices.items():
        sub.add_argument('-o', '--out', required=True, help="output directory")
        if name == 'ablate':
            sub.add_argument('--scene', action='append', required=True, help="scene directory, repeatable")
        elif name != 'gen':
            sub.add_argument('--scene', required=True, help="scene directory")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.verbose:
        log.setLevel(logging.DEBUG)

    try:
        config_load(args.config)
        configure_determinism(args.threads)
        args.func(args)
    except GeoCompleteError as e:
        log.error("%s error: %s", e.category, e)
        print("{} error: {}".format(e.category, e), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        log.error("io error: %s", e)
        print("io error: {}".format(e), file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
