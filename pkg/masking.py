"""Random rectangle masks, target-aware conditional masking and training-sample assembly."""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from errors import ConfigurationError, ParameterError, ShapeError
from geometry import BACKGROUND, TARGET_TAG, check_binary

log = logging.getLogger('geocomplete')

RECT_MODES = ('union', 'complement', 'mixed')
SAMPLE_RETRIES = 32


@dataclass(frozen=True)
class RectMaskParams:
    min_count: int = 1
    max_count: int = 4
    min_side: float = 0.2
    max_side: float = 0.6
    # mixed picks union or complement with equal probability per mask
    mode: str = 'mixed'

    def __post_init__(self):
        if not 1 <= self.min_count <= self.max_count:
            raise ParameterError("rectangle counts must satisfy 1 <= min <= max, got {}..{}".format(self.min_count, self.max_count))
        if not 0 < self.min_side <= self.max_side <= 1:
            raise ParameterError("rectangle side fractions must satisfy 0 < min <= max <= 1, got {}..{}".format(self.min_side, self.max_side))
        if self.mode not in RECT_MODES:
            raise ParameterError("rectangle mode must be one of {}, got {}".format(', '.join(RECT_MODES), self.mode))


@dataclass(frozen=True)
class MaskingConfig:
    rect: RectMaskParams = field(default_factory=RectMaskParams)
    v_fill: float = BACKGROUND
    # None samples uniformly over the references and the target
    target_probability: Optional[float] = None
    target_aware: bool = True
    cloud_masking: bool = True

    def __post_init__(self):
        if not 0 <= self.v_fill <= 1:
            raise ParameterError("v_fill must be within [0, 1], got {}".format(self.v_fill))
        if self.target_probability is not None and not 0 <= self.target_probability <= 1:
            raise ParameterError("target probability must be within [0, 1], got {}".format(self.target_probability))


@dataclass(frozen=True, eq=False)
class TrainingSample:
    cond_image: np.ndarray
    # 1 where cond_image carries no content
    image_mask: np.ndarray
    cond_cloud: np.ndarray
    # 1 where cond_cloud carries no geometry
    cloud_mask: np.ndarray
    weight: np.ndarray
    image: np.ndarray
    source: int

    @property
    def is_target(self):
        return self.source == TARGET_TAG


def random_rect_mask(params, width, height, rng):
    """m^rand: 1 = kept, 0 = masked."""
    count = int(rng.integers(params.min_count, params.max_count + 1))
    inside = np.zeros((height, width), dtype=bool)
    for _ in range(count):
        rw = min(width, max(1, int(round(rng.uniform(params.min_side, params.max_side) * width))))
        rh = min(height, max(1, int(round(rng.uniform(params.min_side, params.max_side) * height))))
        x0 = int(rng.integers(0, width - rw + 1))
        y0 = int(rng.integers(0, height - rh + 1))
        inside[y0:y0 + rh, x0:x0 + rw] = True

    mode = params.mode
    if mode == 'mixed':
        mode = 'union' if rng.random() < 0.5 else 'complement'
    if mode == 'complement':
        inside = ~inside
    return (~inside).astype(np.uint8)


def check_masks(image, r, m_rand):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError("expected an HxWxC image, got shape {}".format(image.shape))
    r = check_binary(r, 'informative mask', image.shape[:2])
    m_rand = check_binary(m_rand, 'random mask', image.shape[:2])
    return image, r.astype(np.float64), m_rand.astype(np.float64)


def conditional_reference_mask(x_ref, r, m_rand):
    """x̂^ref = x^ref ⊙ ((1 - r) + r ⊙ m_rand): only informative pixels can be hidden."""
    x_ref, r, m_rand = check_masks(x_ref, r, m_rand)
    keep = (1 - r) + r * m_rand
    return x_ref * keep[..., None]


def conditional_cloud_mask(p_ref, r, m_rand, v_fill=BACKGROUND):
    """p̂^ref = p^ref ⊙ m_point + v_fill (1 - m_point), m_point = r + (1 - r) ⊙ m_rand."""
    if not 0 <= v_fill <= 1:
        raise ParameterError("v_fill must be within [0, 1], got {}".format(v_fill))
    p_ref, r, m_rand = check_masks(p_ref, r, m_rand)
    m_point = (r + (1 - r) * m_rand)[..., None]
    return p_ref * m_point + v_fill * (1 - m_point)


def reference_sample(scene, products, index, cfg, rng):
    view = scene.references[index]
    h, w = scene.shape
    r = products.informative[index]
    projected = products.reference_clouds[index]

    m_image = random_rect_mask(cfg.rect, w, h, rng)
    if cfg.target_aware:
        cond_image = conditional_reference_mask(view.image, r, m_image)
        kept = (1 - r) + r * m_image
    else:
        cond_image = view.image * m_image[..., None]
        kept = m_image

    cond_cloud = projected.image
    cloud_kept = projected.coverage.astype(np.uint8)
    if cfg.cloud_masking:
        m_cloud = random_rect_mask(cfg.rect, w, h, rng)
        cond_cloud = conditional_cloud_mask(projected.image, r, m_cloud, cfg.v_fill)
        cloud_kept = cloud_kept * (r + (1 - r) * m_cloud)

    return TrainingSample(
        cond_image=cond_image,
        image_mask=(1 - kept).astype(np.uint8),
        cond_cloud=cond_cloud,
        cloud_mask=(1 - cloud_kept).astype(np.uint8),
        weight=np.ones((h, w), dtype=np.uint8),
        image=np.asarray(view.image, dtype=np.float64),
        source=index
    )


def target_sample(scene, products, cfg, rng):
    target = scene.target
    h, w = scene.shape
    known = 1 - np.asarray(target.completion_mask, dtype=np.uint8)
    m_image = random_rect_mask(cfg.rect, w, h, rng)
    kept = known * m_image
    return TrainingSample(
        cond_image=target.image * kept[..., None],
        image_mask=(1 - kept).astype(np.uint8),
        cond_cloud=products.target_cloud.image,
        cloud_mask=(~products.target_cloud.coverage).astype(np.uint8),
        weight=known,
        image=target.image * known[..., None],
        source=TARGET_TAG
    )


def build_training_sample(scene, products, cfg, rng):
    """One (x̂_j, p̂_j, w_j, x_j) draw; target draws with an all-zero weight map are redrawn."""
    n = len(scene.references)
    if n == 0:
        raise ConfigurationError("training samples need at least one reference view")
    for _ in range(SAMPLE_RETRIES):
        if cfg.target_probability is None:
            pick = int(rng.integers(0, n + 1))
        else:
            pick = n if rng.random() < cfg.target_probability else int(rng.integers(0, n))
        if pick < n:
            return reference_sample(scene, products, pick, cfg, rng)
        sample = target_sample(scene, products, cfg, rng)
        if sample.weight.any():
            return sample
        log.warning("Target sample has no known pixels, resampling")
    raise ConfigurationError("no training sample with known pixels after {} draws".format(SAMPLE_RETRIES))
