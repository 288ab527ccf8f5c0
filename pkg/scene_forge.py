"""Synthetic scenes with exact geometry, scene directories and dynamic-object filtering.

Scenes are ray cast against a textured ground plane, an optional back wall
and a handful of boxes and spheres. Every camera ray has unit camera-z, so
the hit distance along the ray is the depth.
"""

import configparser
import glob
import importlib
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List

import numpy as np
from PIL import Image

from errors import ConfigurationError, IngestionError, ShapeError, ValidationError
from geometry import BACKGROUND, NEAR_EPSILON, CameraParams, DepthMap, View, check_binary, check_ratio, load_camera, load_depth, look_at, save_camera, save_depth

log = logging.getLogger('geocomplete')

PRESETS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'presets')
META_SECTION = 'scene'
MASK_MODES = ('inpaint', 'outpaint')
MAX_REFERENCES = 5
META_BOOLEANS = {'True': True, 'False': False, '1': True, '0': False}

SCENE_RETRIES = 8
MIN_TARGET_COVERAGE = 0.05
SKY_COLOR = (0.72, 0.82, 0.95)
UP = (0.0, 0.0, 1.0)

TARGET_GT_FILE = 'target_gt.png'
TARGET_DEPTH_FILE = 'target.gdpt'
TARGET_CAMERA_FILE = 'target.cam'
TARGET_MASK_FILE = 'target_mask.png'
TARGET_DYNAMIC_FILE = 'target_dyn.png'
META_FILE = 'scene.meta'


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    patch: int = 4
    references: int = 3
    objects: int = 2
    wall: bool = True
    fov: float = 60.0
    camera_distance: float = 4.0
    camera_height: float = 1.8
    rotation_jitter: float = 4.0
    translation_jitter: float = 0.4
    dynamic: int = 0
    dynamic_displacement: float = 0.4
    mask_mode: str = 'inpaint'
    mask_area: float = 0.25
    texture_scale: float = 0.35

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigurationError("scene resolution must be positive, got {}x{}".format(self.width, self.height))
        if self.patch < 1 or self.width % self.patch or self.height % self.patch:
            raise ConfigurationError("resolution {}x{} is not a multiple of the latent patch {}".format(self.width, self.height, self.patch))
        if not 1 <= self.references <= MAX_REFERENCES:
            raise ConfigurationError("references must be within 1..{}, got {}".format(MAX_REFERENCES, self.references))
        if self.objects < 0 or self.dynamic < 0:
            raise ConfigurationError("object counts must be >= 0")
        if self.rotation_jitter < 0 or self.translation_jitter < 0 or self.dynamic_displacement < 0:
            raise ConfigurationError("jitter and displacement ranges must be >= 0")
        if not 0 < self.fov < 180:
            raise ConfigurationError("field of view must be within (0, 180), got {}".format(self.fov))
        if self.mask_mode not in MASK_MODES:
            raise ConfigurationError("mask mode must be one of {}, got {}".format(', '.join(MASK_MODES), self.mask_mode))
        if not 0 < self.mask_area < 1:
            raise ConfigurationError("mask area fraction must be within (0, 1), got {}".format(self.mask_area))

    def to_meta(self):
        return {key: str(value) for key, value in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta):
        """Rebuild a config from its string echo; keys it does not know are ignored."""
        values = {}
        for f in fields(cls):
            if f.name not in meta:
                continue
            raw = meta[f.name]
            try:
                values[f.name] = META_BOOLEANS[raw] if f.type is bool else f.type(raw)
            except (KeyError, ValueError):
                raise ConfigurationError("scene config {} = {!r} is not a valid {}".format(f.name, raw, f.type.__name__))
        return cls(**values)


def list_presets():
    return sorted(
        os.path.splitext(os.path.basename(path))[0]
        for path in glob.glob(os.path.join(PRESETS_DIR, '*.py'))
        if not os.path.basename(path).startswith('_')
    )


def scene_config_from_preset(name, **overrides):
    valid = list_presets()
    if name not in valid:
        raise ConfigurationError("unknown preset {!r} (valid value is {})".format(name, ', '.join(valid)))
    preset = importlib.import_module('presets.' + name)
    values = {f.name: getattr(preset, f.name, f.default) for f in fields(SceneConfig)}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return SceneConfig(**values)


@dataclass(frozen=True, eq=False)
class SceneView:
    image: np.ndarray
    depth: DepthMap
    camera: CameraParams
    dynamic_mask: np.ndarray

    def as_view(self):
        return View(self.image, self.depth, self.camera)


@dataclass(frozen=True, eq=False)
class TargetView(SceneView):
    # 1 = missing region to complete
    completion_mask: np.ndarray


@dataclass(frozen=True, eq=False)
class SceneBundle:
    references: List[SceneView]
    target: TargetView
    seed: int
    meta: dict

    def __post_init__(self):
        if not self.references:
            raise ValidationError("scene needs at least one reference view")
        views = [('reference {}'.format(i), view) for i, view in enumerate(self.references)]
        for name, view in views + [('target', self.target)]:
            shape = view.camera.shape
            if view.depth.values.shape != shape:
                raise ValidationError("{} depth is {}, camera is {}".format(name, view.depth.values.shape, shape))
            if np.shape(view.image) != shape + (3,):
                raise ValidationError("{} image is {}, camera is {}".format(name, np.shape(view.image), shape))
            try:
                check_binary(view.dynamic_mask, name + ' dynamic mask', shape)
            except ShapeError as e:
                raise ValidationError(str(e))
        try:
            check_binary(self.target.completion_mask, 'completion mask', self.target.camera.shape)
        except ShapeError as e:
            raise ValidationError(str(e))
        if not np.all(np.isfinite(self.target.image)):
            raise ValidationError("ground-truth target image must be fully populated")

    @property
    def shape(self):
        return self.target.camera.shape


class Primitive:
    dynamic = False

    def __init__(self, color):
        self.color = np.asarray(color, dtype=np.float64)

    def intersect(self, origin, directions):
        raise NotImplementedError


class Plane(Primitive):

    def __init__(self, normal, offset, color):
        super().__init__(color)
        self.normal = np.asarray(normal, dtype=np.float64)
        self.offset = offset

    def intersect(self, origin, directions):
        denom = directions @ self.normal
        with np.errstate(divide='ignore', invalid='ignore'):
            s = (self.offset - origin @ self.normal) / denom
        return np.where(np.isfinite(s) & (s > NEAR_EPSILON), s, np.inf)


class Sphere(Primitive):

    def __init__(self, center, radius, color, dynamic=False):
        super().__init__(color)
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = radius
        self.dynamic = dynamic

    def moved(self, offset):
        return Sphere(self.center + offset, self.radius, self.color, self.dynamic)

    def intersect(self, origin, directions):
        oc = origin - self.center
        a = np.einsum('...i,...i->...', directions, directions)
        b = 2 * directions @ oc
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        root = np.sqrt(np.maximum(disc, 0))
        near = (-b - root) / (2 * a)
        far = (-b + root) / (2 * a)
        s = np.where(near > NEAR_EPSILON, near, far)
        return np.where((disc >= 0) & (s > NEAR_EPSILON), s, np.inf)


class Box(Primitive):

    def __init__(self, lower, upper, color):
        super().__init__(color)
        self.lower = np.asarray(lower, dtype=np.float64)
        self.upper = np.asarray(upper, dtype=np.float64)

    def intersect(self, origin, directions):
        with np.errstate(divide='ignore', invalid='ignore'):
            t1 = (self.lower - origin) / directions
            t2 = (self.upper - origin) / directions
        t1 = np.nan_to_num(t1, nan=-np.inf, posinf=np.inf, neginf=-np.inf)
        t2 = np.nan_to_num(t2, nan=np.inf, posinf=np.inf, neginf=-np.inf)
        enter = np.minimum(t1, t2).max(axis=-1)
        leave = np.maximum(t1, t2).min(axis=-1)
        s = np.where(enter > NEAR_EPSILON, enter, leave)
        return np.where((leave >= enter) & (s > NEAR_EPSILON), s, np.inf)


def procedural_texture(points, base, scale):
    """Checkerboard modulated by a smooth wave, a function of world position only."""
    cells = np.floor(points / scale).sum(axis=-1)
    checker = np.where(cells % 2 == 0, 1.0, 0.6)
    wave = 0.08 * np.sin(7.3 * points[..., 0] + 5.1 * points[..., 1] + 3.7 * points[..., 2])
    return np.clip(base * checker[..., None] + wave[..., None], 0.0, 1.0)


def quantize(image):
    """Snap colors to the 8-bit grid so PNG round trips are exact."""
    return np.round(np.clip(image, 0.0, 1.0) * 255) / 255


def render_view(primitives, camera, texture_scale):
    """Ray cast one view; returns (image, DepthMap, dynamic mask)."""
    directions = camera.pixel_rays()
    origin = camera.center
    hits = np.stack([p.intersect(origin, directions) for p in primitives])
    nearest = np.argmin(hits, axis=0)
    depth = np.take_along_axis(hits, nearest[None], axis=0)[0]
    valid = np.isfinite(depth)
    # stored depths are float32 exactly as the depth file holds them
    depth = np.where(valid, depth, 0.0).astype(np.float32).astype(np.float64)

    image = np.empty(camera.shape + (3,))
    image[:] = SKY_COLOR
    dynamic_mask = np.zeros(camera.shape, dtype=np.uint8)
    for i, primitive in enumerate(primitives):
        hit = valid & (nearest == i)
        if not hit.any():
            continue
        points = origin + depth[hit][:, None] * directions[hit]
        image[hit] = procedural_texture(points, primitive.color, texture_scale)
        if primitive.dynamic:
            dynamic_mask[hit] = 1
    return quantize(image), DepthMap(depth, valid), dynamic_mask


def random_color(rng):
    return rng.uniform(0.25, 0.95, size=3)


def build_primitives(cfg, rng):
    statics = [Plane(UP, 0.0, random_color(rng))]
    if cfg.wall:
        statics.append(Plane((0.0, -1.0, 0.0), -3.0, random_color(rng)))
    for _ in range(cfg.objects):
        x, y = rng.uniform(-1.2, 1.2), rng.uniform(-0.6, 1.6)
        size = rng.uniform(0.15, 0.4)
        if rng.random() < 0.5:
            half = np.array([size, rng.uniform(0.15, 0.4), rng.uniform(0.15, 0.45)])
            statics.append(Box((x - half[0], y - half[1], 0.0), (x + half[0], y + half[1], 2 * half[2]), random_color(rng)))
        else:
            statics.append(Sphere((x, y, size), size, random_color(rng)))
    dynamics = []
    for _ in range(cfg.dynamic):
        radius = rng.uniform(0.2, 0.35)
        center = (rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.6), radius + rng.uniform(0.0, 0.3))
        dynamics.append(Sphere(center, radius, random_color(rng), dynamic=True))
    return statics, dynamics


def jittered_camera(cfg, rng, jitter):
    eye = np.array([0.0, -cfg.camera_distance, cfg.camera_height])
    look = np.array([0.0, 0.5, 0.2])
    base = look_at(eye, look, UP, cfg.fov, cfg.width, cfg.height)
    if not jitter:
        return base
    offset = rng.uniform(-cfg.translation_jitter, cfg.translation_jitter, size=3)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(-cfg.rotation_jitter, cfg.rotation_jitter))
    # Rodrigues rotation applied in the camera frame
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    turn = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * k @ k
    rotation = turn @ base.rotation
    return CameraParams(
        fx=base.fx, fy=base.fy, cx=base.cx, cy=base.cy,
        rotation=rotation, translation=-rotation @ (eye + offset),
        width=base.width, height=base.height
    )


def hole_offset(rng, extent, size):
    """Start of a ``size`` run inside ``extent``, off the border when there is room."""
    lo = min(1, extent - size)
    hi = max(lo, extent - size - 1)
    return int(rng.integers(lo, hi + 1))


def completion_mask(cfg, rng):
    w, h = cfg.width, cfg.height
    mask = np.zeros((h, w), dtype=np.uint8)
    if cfg.mask_mode == 'outpaint':
        band = max(1, int(round(min(w, h) * (1 - np.sqrt(1 - cfg.mask_area)) / 2)))
        mask[:band] = 1
        mask[-band:] = 1
        mask[:, :band] = 1
        mask[:, -band:] = 1
        return mask
    area = cfg.mask_area * w * h
    aspect = rng.uniform(0.6, 1.6)
    rw = int(np.clip(round(np.sqrt(area * aspect)), 1, max(1, w - 2)))
    rh = int(np.clip(round(area / rw), 1, max(1, h - 2)))
    x0 = hole_offset(rng, w, rw)
    y0 = hole_offset(rng, h, rh)
    mask[y0:y0 + rh, x0:x0 + rw] = 1
    return mask


def generate_scene(cfg, seed):
    rng = np.random.default_rng(seed)
    for attempt in range(SCENE_RETRIES):
        statics, dynamics = build_primitives(cfg, rng)
        views = []
        for index in range(cfg.references + 1):
            # the target (last) keeps the base pose, references are jittered
            camera = jittered_camera(cfg, rng, jitter=index < cfg.references)
            offsets = rng.uniform(-cfg.dynamic_displacement, cfg.dynamic_displacement, size=(len(dynamics), 2))
            moved = [d.moved((dx, dy, 0.0)) for d, (dx, dy) in zip(dynamics, offsets)]
            image, depth, dynamic_mask = render_view(statics + moved, camera, cfg.texture_scale)
            views.append((image, depth, camera, dynamic_mask))

        target_depth = views[-1][1]
        coverage = target_depth.valid.mean()
        if coverage >= MIN_TARGET_COVERAGE:
            break
        log.warning("Scene seed %s attempt %d: target sees %.1f%% geometry, regenerating", seed, attempt + 1, 100 * coverage)
    else:
        raise ConfigurationError("target camera sees no geometry after {} attempts".format(SCENE_RETRIES))

    references = [SceneView(*view) for view in views[:-1]]
    target = TargetView(*views[-1], completion_mask=completion_mask(cfg, rng))
    log.debug("Generated scene seed %s: %d references, %dx%d", seed, cfg.references, cfg.width, cfg.height)
    return SceneBundle(references, target, int(seed), cfg.to_meta())


def apply_dynamic_filter(image, dyn_mask, background=BACKGROUND):
    """x̃: pixels under the dynamic mask replaced by the background value."""
    image = np.asarray(image, dtype=np.float64)
    check_binary(dyn_mask, 'dynamic mask', image.shape[:2])
    return np.where(np.asarray(dyn_mask)[..., None] == 1, float(background), image)


def corrupt_dynamic_mask(mask, extra_fraction, rng):
    """Flip floor(extra_fraction * #zeros) random zero pixels to one; never unmasks."""
    check_ratio(extra_fraction)
    mask = check_binary(mask, 'dynamic mask').astype(np.uint8)
    zeros = np.flatnonzero(mask.ravel() == 0)
    count = int(np.floor(extra_fraction * len(zeros)))
    if count == 0:
        return mask.copy()
    out = mask.ravel().copy()
    out[rng.choice(zeros, size=count, replace=False)] = 1
    return out.reshape(mask.shape)


def save_image(path, image):
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), 'RGB').save(path)


def save_mask(path, mask):
    Image.fromarray((np.asarray(mask) * 255).astype(np.uint8), 'L').save(path)


def load_image(path):
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert('RGB'), dtype=np.float64) / 255
    except OSError as e:
        raise IngestionError(path, "unreadable image ({})".format(e))


def load_mask(path):
    try:
        with Image.open(path) as img:
            values = np.asarray(img.convert('L'))
    except OSError as e:
        raise IngestionError(path, "unreadable mask ({})".format(e))
    if not np.all((values == 0) | (values == 255)):
        raise ValidationError("{}: mask pixels must be 0 or 255".format(path))
    return (values == 255).astype(np.uint8)


def save_scene(bundle, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, view in enumerate(bundle.references):
        save_image(directory / 'ref_{}.png'.format(i), view.image)
        save_depth(directory / 'ref_{}.gdpt'.format(i), view.depth)
        save_camera(directory / 'ref_{}.cam'.format(i), view.camera)
        save_mask(directory / 'ref_{}_dyn.png'.format(i), view.dynamic_mask)
    target = bundle.target
    save_image(directory / TARGET_GT_FILE, target.image)
    save_depth(directory / TARGET_DEPTH_FILE, target.depth)
    save_camera(directory / TARGET_CAMERA_FILE, target.camera)
    save_mask(directory / TARGET_MASK_FILE, target.completion_mask)
    save_mask(directory / TARGET_DYNAMIC_FILE, target.dynamic_mask)

    meta = configparser.ConfigParser()
    meta[META_SECTION] = dict(bundle.meta, seed=str(bundle.seed))
    with open(directory / META_FILE, 'w') as f:
        meta.write(f)
    log.info("Scene saved to %s", directory)


def require(path):
    if not path.is_file():
        raise IngestionError(path, "missing file")
    return path


def load_view_parts(directory, stem, image_name, dynamic_name):
    image = load_image(require(directory / image_name))
    depth = load_depth(require(directory / (stem + '.gdpt')))
    camera = load_camera(require(directory / (stem + '.cam')))
    dynamic_path = directory / dynamic_name
    if dynamic_path.is_file():
        dynamic_mask = load_mask(dynamic_path)
    else:
        dynamic_mask = np.zeros(camera.shape, dtype=np.uint8)
    return image, depth, camera, dynamic_mask


def check_config_echo(path, meta, shape):
    try:
        config = SceneConfig.from_meta(meta)
    except ConfigurationError as e:
        raise IngestionError(path, "invalid scene config ({})".format(e))
    if 'width' in meta and 'height' in meta and (config.height, config.width) != shape:
        raise ValidationError("{}: config echo says {}x{}, views are {}x{}".format(path, config.width, config.height, shape[1], shape[0]))
    return config


def load_scene(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestionError(directory, "scene directory does not exist")

    references = []
    while (directory / 'ref_{}.png'.format(len(references))).is_file():
        i = len(references)
        references.append(SceneView(*load_view_parts(directory, 'ref_{}'.format(i), 'ref_{}.png'.format(i), 'ref_{}_dyn.png'.format(i))))
    if not references:
        raise IngestionError(directory / 'ref_0.png', "scene has no reference views")

    parts = load_view_parts(directory, 'target', TARGET_GT_FILE, TARGET_DYNAMIC_FILE)
    target = TargetView(*parts, completion_mask=load_mask(require(directory / TARGET_MASK_FILE)))

    seed, meta = 0, {}
    meta_path = directory / META_FILE
    if meta_path.is_file():
        parser = configparser.ConfigParser()
        try:
            parser.read(meta_path)
            meta = dict(parser[META_SECTION])
            seed = int(meta.pop('seed', 0))
        except (configparser.Error, KeyError, ValueError) as e:
            raise IngestionError(meta_path, "malformed scene metadata ({})".format(e))
        check_config_echo(meta_path, meta, target.camera.shape)

    log.info("Loaded scene %s with %d references", directory, len(references))
    return SceneBundle(references, target, seed, meta)
