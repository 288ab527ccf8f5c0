"""Per-scene training, completion by iterative denoising and the robustness/ablation harnesses."""

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from dualnet import DualBranchDenoiser, NoiseSchedule, SAMPLERS, add_noise, check_compatible, denoiser_forward, downsample_mask, epsilon_loss, from_latent, image_tensor, latent_weight, load_checkpoint, sample, save_checkpoint, tensor_image, to_latent
from errors import ConfigurationError, NumericError, ParameterError, ValidationError
from geometry import TARGET_TAG, GeometryProducts, View, check_ratio, perturb_noise, project, scene_cloud, sparsify, uncovered
from masking import MaskingConfig, build_training_sample
from metrics import evaluate_completion
from scene_forge import apply_dynamic_filter, corrupt_dynamic_mask

log = logging.getLogger('geocomplete')

ROBUST_KINDS = ('noise', 'sparse', 'mask-error', 'mask-removal')
SMOOTHING_WINDOW = 20


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 8
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    seed: int = 0
    # 0 writes only the final checkpoint
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigurationError("iterations and batch size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive, got {}".format(self.learning_rate))


@dataclass(frozen=True)
class InferConfig:
    steps: int = 50
    sampler: str = 'ancestral'
    seed: int = 0
    composite: bool = True

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ConfigurationError("sampler must be one of {}, got {}".format(', '.join(SAMPLERS), self.sampler))
        if self.steps < 1:
            raise ConfigurationError("sampler steps must be >= 1, got {}".format(self.steps))


@dataclass(frozen=True)
class RobustnessGrid:
    kind: str
    levels: Sequence[float] = (0.0, 0.25, 0.5, 0.75)
    seeds: Sequence[int] = (0,)
    # noise std as a fraction of the scene diameter
    noise_scale: float = 0.02
    retrain: bool = True

    def __post_init__(self):
        if self.kind not in ROBUST_KINDS:
            raise ConfigurationError("perturbation kind must be one of {}, got {}".format(', '.join(ROBUST_KINDS), self.kind))
        if not self.levels or not self.seeds:
            raise ConfigurationError("robustness grid needs at least one level and one seed")
        for level in self.levels:
            try:
                check_ratio(level)
            except ParameterError as e:
                raise ConfigurationError(str(e))


@dataclass
class TrainResult:
    model: DualBranchDenoiser
    losses: List[float]
    checkpoints: List[Path]


@dataclass(frozen=True)
class RobustnessRow:
    kind: str
    level: float
    seed: int
    psnr: float
    ssim: float
    delta_psnr: Optional[float] = None


@dataclass(frozen=True)
class AblationRow:
    variant: str
    scene: str
    seed: int
    psnr: float
    ssim: float


# (denoiser overrides, masking overrides) per ablation variant
ABLATIONS = {
    'no_cloud': ({'dual_branch': False}, {'target_aware': False, 'cloud_masking': False}),
    'no_jsa': ({'attention': 'full'}, {'target_aware': False, 'cloud_masking': False}),
    'no_masking': ({'attention': 'masked'}, {'target_aware': False, 'cloud_masking': False}),
    'full': ({'attention': 'masked'}, {'target_aware': True, 'cloud_masking': True}),
    'no_cm_jsa': ({'attention': 'full'}, {'target_aware': True, 'cloud_masking': False}),
}


def configure_determinism(threads=1):
    """Single-thread mode makes checkpoints, samples and metrics bit-identical across runs."""
    if threads < 1:
        raise ConfigurationError("thread count must be >= 1, got {}".format(threads))
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(threads == 1)
    log.debug("torch running on %d thread(s)", threads)


def filtered_view(image, depth, camera, hidden):
    """Geometry input: hidden pixels painted background and dropped from the depth."""
    return View(apply_dynamic_filter(image, hidden), depth.invalidate(hidden), camera)


def precompute_geometry(scene, cloud_transform=None, dynamic_masks=None, splat_radius=1):
    """p^ref_i, p^tar and r^ref_i from the dynamic-filtered views.

    The target contributes only its known pixels. ``cloud_transform`` is
    applied once to the whole tagged cloud before any projection;
    ``dynamic_masks`` (references then target) replaces the scene's masks.
    """
    n = len(scene.references)
    if dynamic_masks is None:
        dynamic_masks = [v.dynamic_mask for v in scene.references] + [scene.target.dynamic_mask]
    if len(dynamic_masks) != n + 1:
        raise ConfigurationError("expected {} dynamic masks, got {}".format(n + 1, len(dynamic_masks)))

    references = [filtered_view(v.image, v.depth, v.camera, m) for v, m in zip(scene.references, dynamic_masks)]
    target = scene.target
    hidden = (np.asarray(dynamic_masks[-1]) | np.asarray(target.completion_mask)).astype(np.uint8)
    target_view = filtered_view(target.image, target.depth, target.camera, hidden)

    cloud = scene_cloud(references, target_view)
    if cloud_transform is not None:
        cloud = cloud_transform(cloud)

    reference_clouds = [project(cloud.without_source(i), v.camera, splat_radius) for i, v in enumerate(references)]
    target_cloud = project(cloud.with_sources(range(n)), target.camera, splat_radius)
    target_only = cloud.with_sources([TARGET_TAG])
    informative = [uncovered(project(target_only, v.camera, splat_radius)) for v in references]
    log.debug("Geometry: %d points, target coverage %.1f%%", len(cloud), 100 * target_cloud.coverage.mean())
    return GeometryProducts(reference_clouds, target_cloud, informative, cloud)


def scene_diameter(scene):
    points = scene_cloud([v.as_view() for v in scene.references] + [scene.target.as_view()]).points
    if len(points) == 0:
        return 0.0
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def encode(images, patch):
    """[0, 1] images (..., H, W, 3) to latents scaled to [-1, 1]."""
    return to_latent(image_tensor(np.asarray(images), torch.float32), patch) * 2 - 1


def decode(latent, patch):
    return tensor_image(from_latent((latent + 1) / 2, patch)).astype(np.float64)


@dataclass
class Batch:
    image: torch.Tensor
    cond_image: torch.Tensor
    image_mask: torch.Tensor
    cond_cloud: torch.Tensor
    cloud_mask: torch.Tensor
    weight: torch.Tensor

    def arrays(self):
        return {name: value.numpy() for name, value in vars(self).items()}


def collate(samples, patch):
    def stack(name):
        return np.stack([getattr(s, name) for s in samples])

    return Batch(
        image=encode(stack('image'), patch),
        cond_image=encode(stack('cond_image'), patch),
        image_mask=downsample_mask(stack('image_mask'), patch),
        cond_cloud=encode(stack('cond_cloud'), patch),
        cloud_mask=downsample_mask(stack('cloud_mask'), patch),
        weight=latent_weight(stack('weight'), patch)
    )


def cloud_condition(model, cond_cloud, cloud_mask):
    return (cond_cloud, cloud_mask) if model.cfg.dual_branch else None


def dump_batch(dump_dir, step, batch, t, eps):
    if dump_dir is None:
        return None
    path = Path(dump_dir) / 'nan_batch_step{}.npz'.format(step)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, t=t.numpy(), eps=eps.numpy(), **batch.arrays())
    return path


def check_model_matches(model_cfg, scene):
    if (model_cfg.height, model_cfg.width) != scene.shape:
        raise ValidationError("model resolution {}x{} does not match the scene {}x{}".format(
            model_cfg.width, model_cfg.height, scene.shape[1], scene.shape[0]))


def train_scene(scene, products, cfg, model_cfg, out_dir=None):
    """Optimise the masked epsilon objective on one scene; returns the model, loss trace and checkpoints."""
    check_model_matches(model_cfg, scene)
    rng = np.random.default_rng(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)
    model = DualBranchDenoiser(model_cfg)
    sched = NoiseSchedule.from_config(model_cfg)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps
    )
    out_dir = Path(out_dir) if out_dir is not None else None
    losses, checkpoints = [], []

    log.info("Training %d iterations, batch %d, lr %g, seed %d", cfg.iterations, cfg.batch_size, cfg.learning_rate, cfg.seed)
    model.train()
    for step in range(1, cfg.iterations + 1):
        samples = [build_training_sample(scene, products, cfg.masking, rng) for _ in range(cfg.batch_size)]
        batch = collate(samples, model_cfg.patch)
        t = torch.randint(0, sched.T, (cfg.batch_size,), generator=generator)
        eps = torch.randn(batch.image.shape, generator=generator)
        noisy = add_noise(batch.image, t, eps, sched)

        try:
            pred = denoiser_forward(
                model, noisy, t, (batch.cond_image, batch.image_mask),
                cloud_condition(model, batch.cond_cloud, batch.cloud_mask)
            )
            loss = epsilon_loss(eps, pred, batch.weight)
            if not torch.isfinite(loss):
                raise NumericError("loss is {} at step {}".format(loss.item(), step))
        except NumericError:
            path = dump_batch(out_dir, step, batch, t, eps)
            log.error("Non-finite training state at step %d, offending batch dumped to %s", step, path)
            raise

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(loss.item())

        if cfg.log_every and step % cfg.log_every == 0:
            log.debug("step %d loss %.6f", step, losses[-1])
        if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.iterations:
            checkpoints.append(write_checkpoint(model, out_dir / 'checkpoint_{:06d}.gckp'.format(step)))

    if out_dir is not None:
        checkpoints.append(write_checkpoint(model, out_dir / 'checkpoint.gckp'))
        write_loss_trace(out_dir / 'loss.csv', losses)
    log.info("Training finished, smoothed loss %.5f -> %.5f", smoothed(losses[:SMOOTHING_WINDOW]), smoothed(losses[-SMOOTHING_WINDOW:]))
    return TrainResult(model, losses, checkpoints)


def smoothed(values):
    return float(np.mean(values)) if len(values) else float('nan')


def write_checkpoint(model, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, model)
    log.info("Checkpoint written to %s", path)
    return path


def write_loss_trace(path, losses):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['step', 'loss'])
        for step, loss in enumerate(losses, start=1):
            writer.writerow([step, repr(loss)])


def resolve_model(checkpoint, expected=None):
    if isinstance(checkpoint, DualBranchDenoiser):
        if expected is not None:
            check_compatible(expected, checkpoint.cfg)
        return checkpoint
    return load_checkpoint(checkpoint, expected)


def infer(scene, products, checkpoint, cfg, expected=None):
    """Complete the target hole; known pixels are copied verbatim when compositing."""
    model = resolve_model(checkpoint, expected)
    patch = model.cfg.patch
    check_model_matches(model.cfg, scene)
    target = scene.target
    known = 1 - np.asarray(target.completion_mask, dtype=np.uint8)
    coverage = products.target_cloud.coverage

    cond_tar = (encode(target.image * known[..., None], patch)[None], downsample_mask(target.completion_mask, patch)[None])
    cond_cloud = cloud_condition(
        model,
        encode(products.target_cloud.image, patch)[None],
        downsample_mask((~coverage).astype(np.uint8), patch)[None]
    )
    generator = torch.Generator().manual_seed(cfg.seed)
    latent = sample(model, NoiseSchedule.from_config(model.cfg), cond_tar, cond_cloud, cfg.steps, cfg.sampler, generator)
    image = np.clip(decode(latent[0], patch), 0.0, 1.0)
    if cfg.composite:
        image = np.where(known[..., None] == 1, target.image, image)
    return image


def copy_cloud_baseline(scene, products):
    """p^tar pasted into the hole, known pixels kept."""
    hole = np.asarray(scene.target.completion_mask)[..., None] == 1
    return np.where(hole, products.target_cloud.image, scene.target.image)


def perturbed_products(scene, kind, level, rng, noise_sigma):
    if kind == 'noise':
        return precompute_geometry(scene, lambda cloud: perturb_noise(cloud, level, noise_sigma, rng))
    if kind == 'sparse':
        return precompute_geometry(scene, lambda cloud: sparsify(cloud, level, rng))
    masks = [v.dynamic_mask for v in scene.references] + [scene.target.dynamic_mask]
    if kind == 'mask-error':
        masks = [corrupt_dynamic_mask(m, level, rng) for m in masks]
    elif level > 0:
        masks = [np.zeros_like(m) for m in masks]
    return precompute_geometry(scene, dynamic_masks=masks)


def robustness_run(scene, grid, model_cfg, train_cfg, infer_cfg, checkpoint=None, scene_id=''):
    """PSNR/SSIM per (level, seed) cell, deltas against level 0 of the same seed."""
    if not grid.retrain and checkpoint is None:
        raise ConfigurationError("re-inference without retraining needs a checkpoint")
    sigma = grid.noise_scale * scene_diameter(scene)
    completion = scene.target.completion_mask
    cells = {}
    for seed in grid.seeds:
        for level in grid.levels:
            products = perturbed_products(scene, grid.kind, level, np.random.default_rng(seed), sigma)
            if grid.retrain:
                model = train_scene(scene, products, replace(train_cfg, seed=seed), model_cfg).model
            else:
                model = resolve_model(checkpoint, model_cfg)
            output = infer(scene, products, model, replace(infer_cfg, seed=seed))
            report = evaluate_completion(output, scene.target.image, completion, scene_id=scene_id, seed=seed)
            cells[(level, seed)] = report
            log.info("%s level %.2f seed %d: masked PSNR %.3f dB", grid.kind, level, seed, report.psnr_masked)

    rows = []
    for (level, seed), report in cells.items():
        base = cells.get((0.0, seed))
        delta = report.psnr_masked - base.psnr_masked if base is not None else None
        rows.append(RobustnessRow(grid.kind, level, seed, report.psnr_masked, report.ssim_full, delta))
    return rows


def write_robustness_csv(path, rows):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['kind', 'level', 'seed', 'psnr', 'ssim', 'delta_psnr'])
        for row in rows:
            writer.writerow([row.kind, row.level, row.seed, row.psnr, row.ssim, '' if row.delta_psnr is None else row.delta_psnr])


def ablation_configs(variant, model_cfg, train_cfg):
    if variant not in ABLATIONS:
        raise ConfigurationError("unknown ablation {!r} (valid value is {})".format(variant, ', '.join(ABLATIONS)))
    model_overrides, masking_overrides = ABLATIONS[variant]
    return replace(model_cfg, **model_overrides), replace(train_cfg, masking=replace(train_cfg.masking, **masking_overrides))


def ablation_run(scenes, variants, seeds, model_cfg, train_cfg, infer_cfg):
    """Masked-region PSNR/SSIM of each variant on each (scene id, scene) pair and seed."""
    rows = []
    for scene_id, scene in scenes:
        products = precompute_geometry(scene)
        for variant in variants:
            variant_model, variant_train = ablation_configs(variant, model_cfg, train_cfg)
            for seed in seeds:
                model = train_scene(scene, products, replace(variant_train, seed=seed), variant_model).model
                output = infer(scene, products, model, replace(infer_cfg, seed=seed))
                report = evaluate_completion(output, scene.target.image, scene.target.completion_mask, scene_id=scene_id, seed=seed)
                rows.append(AblationRow(variant, scene_id, seed, report.psnr_masked, report.ssim_full))
                log.info("ablation %s scene %s seed %d: masked PSNR %.3f dB", variant, scene_id, seed, report.psnr_masked)
    return rows


def summarize_ablation(rows):
    means = {}
    for variant in dict.fromkeys(row.variant for row in rows):
        selected = [row for row in rows if row.variant == variant]
        means[variant] = (float(np.mean([r.psnr for r in selected])), float(np.mean([r.ssim for r in selected])))
    return means


def write_ablation_csv(path, rows):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['variant', 'scene', 'seed', 'psnr', 'ssim'])
        for row in rows:
            writer.writerow([row.variant, row.scene, row.seed, row.psnr, row.ssim])
