"""Pinhole cameras, depth back-projection and z-buffered point splatting.

Pixel (u, v) is column u, row v; its centre sits on the integer coordinate,
so the pixel a point lands on is the nearest integer of its projection.
Rotation and translation map world to camera (x right, y down, z forward).
"""

import configparser
import logging
import struct
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from errors import ConfigurationError, DataError, IngestionError, ParameterError, ShapeError, ValidationError, ViewIndexError

log = logging.getLogger('geocomplete')

NEAR_EPSILON = 1e-6
ORTHONORMAL_TOLERANCE = 1e-6
# uncovered pixels look exactly like masked-out cloud pixels (v_fill)
BACKGROUND = 1.0

TARGET_TAG = -1
EXTERNAL_TAG = -2

DEPTH_MAGIC = b'GDPT'
CLOUD_MAGIC = b'GPCD'
CAMERA_SECTION = 'camera'
CLOUD_RECORD = np.dtype([('position', '<f4', (3,)), ('color', 'u1', (3,))])


@dataclass(frozen=True, eq=False)
class CameraParams:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        try:
            rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
            translation = np.array(self.translation, dtype=np.float64).reshape(3)
        except ValueError as e:
            raise ShapeError("camera rotation must be 3x3 and translation 3-vector ({})".format(e))
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, 'rotation', rotation)
        object.__setattr__(self, 'translation', translation)
        object.__setattr__(self, 'width', int(self.width))
        object.__setattr__(self, 'height', int(self.height))
        for name in ('fx', 'fy', 'cx', 'cy'):
            object.__setattr__(self, name, float(getattr(self, name)))

        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive, got fx={} fy={}".format(self.fx, self.fy))
        if self.width < 1 or self.height < 1:
            raise ValidationError("camera resolution must be at least 1x1, got {}x{}".format(self.width, self.height))
        values = np.concatenate([rotation.ravel(), translation, [self.fx, self.fy, self.cx, self.cy]])
        if not np.all(np.isfinite(values)):
            raise ValidationError("camera parameters must be finite")
        if np.abs(rotation.T @ rotation - np.eye(3)).max() >= ORTHONORMAL_TOLERANCE or np.linalg.det(rotation) <= 0:
            raise ValidationError("camera rotation is not a proper rotation (orthonormal, det +1)")

    def __eq__(self, other):
        if not isinstance(other, CameraParams):
            return NotImplemented
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height) == \
            (other.fx, other.fy, other.cx, other.cy, other.width, other.height) \
            and np.array_equal(self.rotation, other.rotation) \
            and np.array_equal(self.translation, other.translation)

    __hash__ = None

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points):
        return points @ self.rotation.T + self.translation

    def camera_to_world(self, points):
        return (points - self.translation) @ self.rotation

    def pixel_rays(self):
        """World-frame ray directions with unit camera-z, one per pixel, shape (H, W, 3)."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        directions = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        return directions @ self.rotation


def look_at(eye, target, up, fov_degrees, width, height):
    """Camera at ``eye`` looking at ``target`` with a horizontal field of view."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ParameterError("eye and target coincide")
    forward /= norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise ParameterError("up vector is parallel to the viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    focal = 0.5 * width / np.tan(np.radians(fov_degrees) / 2)
    return CameraParams(
        fx=focal, fy=focal,
        cx=(width - 1) / 2, cy=(height - 1) / 2,
        rotation=rotation, translation=-rotation @ eye,
        width=width, height=height
    )


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        if values.ndim != 2 or values.shape != valid.shape:
            raise ShapeError("depth values {} and validity {} must be equal 2D shapes".format(values.shape, valid.shape))
        values.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'valid', valid)

    @classmethod
    def from_values(cls, values):
        """Validity from the values: non-positive, NaN and infinite depths are invalid."""
        values = np.asarray(values, dtype=np.float64)
        with np.errstate(invalid='ignore'):
            valid = np.isfinite(values) & (values > 0)
        return cls(np.where(valid, values, 0.0), valid)

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]

    def invalidate(self, mask):
        """Copy with every pixel where ``mask`` is set marked invalid."""
        return DepthMap(self.values, self.valid & ~np.asarray(mask, dtype=bool))

    def __eq__(self, other):
        if not isinstance(other, DepthMap):
            return NotImplemented
        return np.array_equal(self.values, other.values) and np.array_equal(self.valid, other.valid)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray
    sources: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        colors = np.array(self.colors, dtype=np.float64).reshape(-1, 3)
        sources = np.array(self.sources, dtype=np.int64).reshape(-1)
        if not (len(points) == len(colors) == len(sources)):
            raise ShapeError("cloud has {} points, {} colors and {} source tags".format(len(points), len(colors), len(sources)))
        if not np.all(np.isfinite(points)):
            raise DataError("point cloud coordinates must be finite")
        object.__setattr__(self, 'points', points)
        object.__setattr__(self, 'colors', colors)
        object.__setattr__(self, 'sources', sources)

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    @classmethod
    def concat(cls, clouds):
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            np.concatenate([c.sources for c in clouds])
        )

    def select(self, keep):
        keep = np.asarray(keep)
        return PointCloud(self.points[keep], self.colors[keep], self.sources[keep])

    def with_sources(self, tags):
        return self.select(np.isin(self.sources, list(tags)))

    def without_source(self, tag):
        return self.select(self.sources != tag)


@dataclass(frozen=True, eq=False)
class ProjectedCloud:
    image: np.ndarray
    depth_buffer: np.ndarray
    coverage: np.ndarray


@dataclass(frozen=True, eq=False)
class View:
    image: np.ndarray
    depth: DepthMap
    camera: CameraParams


@dataclass(frozen=True, eq=False)
class GeometryProducts:
    """Per-scene conditioning inputs: p^ref_i, p^tar and the informative masks r^ref_i."""
    reference_clouds: List[ProjectedCloud]
    target_cloud: ProjectedCloud
    informative: List[np.ndarray]
    # tagged scene cloud the projections were made from
    cloud: Optional[PointCloud] = None


def check_binary(mask, name, shape=None):
    mask = np.asarray(mask)
    if shape is not None and mask.shape != tuple(shape):
        raise ShapeError("{} has shape {}, expected {}".format(name, mask.shape, tuple(shape)))
    if not np.all((mask == 0) | (mask == 1)):
        raise ValidationError("{} must be binary (0/1)".format(name))
    return mask


def back_project(depth, cam, color):
    if depth.values.shape != cam.shape:
        raise ShapeError("depth is {}x{} but camera is {}x{}".format(depth.width, depth.height, cam.width, cam.height))
    color = np.asarray(color, dtype=np.float64)
    if color.shape != cam.shape + (3,):
        raise ShapeError("color image has shape {}, expected {}".format(color.shape, cam.shape + (3,)))

    v, u = np.nonzero(depth.valid)
    z = depth.values[v, u]
    if not np.all(np.isfinite(z) & (z > 0)):
        raise DataError("depth map has non-finite or non-positive values on valid pixels")

    x = (u - cam.cx) * z / cam.fx
    y = (v - cam.cy) * z / cam.fy
    world = cam.camera_to_world(np.stack([x, y, z], axis=-1))
    return PointCloud(world, color[v, u], np.zeros(len(z), dtype=np.int64))


def project(cloud, cam, splat_radius=1, background=BACKGROUND):
    """Z-buffered splat of ``cloud`` into ``cam``.

    Per pixel the smallest camera-z wins, ties go to the lowest point index.
    ``splat_radius`` r covers a (2r-1)x(2r-1) square around the nearest pixel.
    """
    if splat_radius < 1:
        raise ParameterError("splat radius must be >= 1, got {}".format(splat_radius))
    h, w = cam.shape
    image = np.full((h, w, 3), float(background))
    depth_buffer = np.full((h, w), np.inf)
    coverage = np.zeros((h, w), dtype=bool)
    if len(cloud) == 0:
        return ProjectedCloud(image, depth_buffer, coverage)

    cam_points = cam.world_to_camera(cloud.points)
    index = np.flatnonzero(cam_points[:, 2] > NEAR_EPSILON)
    x, y, z = cam_points[index].T
    fu = np.floor(cam.fx * x / z + cam.cx + 0.5)
    fv = np.floor(cam.fy * y / z + cam.cy + 0.5)

    reach = splat_radius - 1
    near = (fu >= -reach) & (fu <= w - 1 + reach) & (fv >= -reach) & (fv <= h - 1 + reach)
    index, z = index[near], z[near]
    pu, pv = fu[near].astype(np.int64), fv[near].astype(np.int64)

    if reach:
        offsets = np.arange(-reach, reach + 1)
        du, dv = (a.ravel() for a in np.meshgrid(offsets, offsets))
        pu = (pu[:, None] + du).ravel()
        pv = (pv[:, None] + dv).ravel()
        index = np.repeat(index, len(du))
        z = np.repeat(z, len(du))

    inside = (pu >= 0) & (pu < w) & (pv >= 0) & (pv < h)
    pixel = pv[inside] * w + pu[inside]
    index, z = index[inside], z[inside]
    if len(pixel) == 0:
        return ProjectedCloud(image, depth_buffer, coverage)

    order = np.lexsort((index, z, pixel))
    pixel = pixel[order]
    first = np.ones(len(pixel), dtype=bool)
    first[1:] = pixel[1:] != pixel[:-1]
    winners = order[first]
    pixel = pixel[first]

    rows, cols = np.divmod(pixel, w)
    image[rows, cols] = cloud.colors[index[winners]]
    depth_buffer[rows, cols] = z[winners]
    coverage[rows, cols] = True
    return ProjectedCloud(image, depth_buffer, coverage)


def scene_cloud(references, target=None):
    """Union of every view's back-projection; references tagged by index, the target by TARGET_TAG."""
    clouds = []
    for i, view in enumerate(references):
        cloud = back_project(view.depth, view.camera, view.image)
        clouds.append(PointCloud(cloud.points, cloud.colors, np.full(len(cloud), i)))
    if target is not None:
        cloud = back_project(target.depth, target.camera, target.image)
        clouds.append(PointCloud(cloud.points, cloud.colors, np.full(len(cloud), TARGET_TAG)))
    return PointCloud.concat(clouds)


def render_reference_cloud(references, target, index, splat_radius=1):
    """p^ref_i: every view except reference ``index`` (target included) seen from reference ``index``."""
    if not 0 <= index < len(references):
        raise ViewIndexError("reference index {} out of range for {} references".format(index, len(references)))
    cloud = scene_cloud(references, target).without_source(index)
    return project(cloud, references[index].camera, splat_radius)


def render_target_cloud(references, target_camera, splat_radius=1):
    """p^tar: all references (never the target's own depth) seen from the target camera."""
    if not references:
        raise ConfigurationError("target cloud needs at least one reference view")
    return project(scene_cloud(references), target_camera, splat_radius)


def informative_mask(target, ref_cam, splat_radius=1):
    """r^ref_i: 1 where the reference sees content the target view does not cover."""
    cloud = back_project(target.depth, target.camera, target.image)
    return uncovered(project(cloud, ref_cam, splat_radius))


def uncovered(projected):
    return (~projected.coverage).astype(np.uint8)


def check_ratio(ratio):
    if not 0 <= ratio <= 1:
        raise ParameterError("ratio must be within [0, 1], got {}".format(ratio))
    return ratio


def perturb_noise(cloud, ratio, sigma, rng):
    """Gaussian offsets (std ``sigma``) on floor(ratio * N) uniformly chosen points."""
    check_ratio(ratio)
    if sigma < 0:
        raise ParameterError("noise sigma must be >= 0, got {}".format(sigma))
    count = int(np.floor(ratio * len(cloud)))
    if count == 0 or sigma == 0:
        return cloud
    chosen = rng.choice(len(cloud), size=count, replace=False)
    points = cloud.points.copy()
    points[chosen] += rng.normal(0.0, sigma, size=(count, 3))
    return PointCloud(points, cloud.colors, cloud.sources)


def sparsify(cloud, ratio, rng):
    """Drop floor(ratio * N) uniformly chosen points, survivors keep their order."""
    check_ratio(ratio)
    count = int(np.floor(ratio * len(cloud)))
    if count == 0:
        return cloud
    keep = np.ones(len(cloud), dtype=bool)
    keep[rng.choice(len(cloud), size=count, replace=False)] = False
    return cloud.select(keep)


def save_depth(path, depth):
    values = np.where(depth.valid, depth.values, 0.0).astype('<f4')
    with open(path, 'wb') as f:
        f.write(DEPTH_MAGIC + struct.pack('<II', depth.width, depth.height))
        f.write(values.tobytes())


def load_depth(path):
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise IngestionError(path, e.strerror or str(e))
    if len(data) < 12 or data[:4] != DEPTH_MAGIC:
        raise IngestionError(path, "not a depth file (missing GDPT header)")
    width, height = struct.unpack_from('<II', data, 4)
    if len(data) != 12 + 4 * width * height:
        raise IngestionError(path, "expected {}x{} depths, file has {} bytes".format(width, height, len(data)))
    values = np.frombuffer(data, dtype='<f4', count=width * height, offset=12)
    return DepthMap.from_values(values.astype(np.float64).reshape(height, width))


def format_numbers(values):
    return ' '.join(repr(float(v)) for v in np.ravel(values))


def save_camera(path, cam):
    config = configparser.ConfigParser()
    config[CAMERA_SECTION] = {
        'fx': repr(cam.fx),
        'fy': repr(cam.fy),
        'cx': repr(cam.cx),
        'cy': repr(cam.cy),
        'width': str(cam.width),
        'height': str(cam.height),
        'rotation': format_numbers(cam.rotation),
        'translation': format_numbers(cam.translation)
    }
    with open(path, 'w') as f:
        config.write(f)


def load_camera(path):
    try:
        with open(path, 'r') as f:
            text = f.read()
    except OSError as e:
        raise IngestionError(path, e.strerror or str(e))

    # hand-written camera files may skip the section header
    if not text.lstrip().startswith('['):
        text = '[{}]\n'.format(CAMERA_SECTION) + text
    config = configparser.ConfigParser()
    try:
        config.read_string(text)
        section = config[CAMERA_SECTION]
        rotation = [float(v) for v in section['rotation'].split()]
        translation = [float(v) for v in section['translation'].split()]
        if len(rotation) != 9 or len(translation) != 3:
            raise ValueError("rotation needs 9 numbers and translation 3")
        fields = {key: float(section[key]) for key in ('fx', 'fy', 'cx', 'cy')}
        width, height = int(section['width']), int(section['height'])
    except (configparser.Error, KeyError, ValueError) as e:
        raise IngestionError(path, "malformed camera file ({})".format(e))
    return CameraParams(rotation=rotation, translation=translation, width=width, height=height, **fields)


def save_point_cloud(path, cloud):
    records = np.zeros(len(cloud), dtype=CLOUD_RECORD)
    records['position'] = cloud.points
    records['color'] = np.clip(np.round(cloud.colors * 255), 0, 255)
    with open(path, 'wb') as f:
        f.write(CLOUD_MAGIC + struct.pack('<I', len(cloud)))
        f.write(records.tobytes())


def load_point_cloud(path):
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise IngestionError(path, e.strerror or str(e))
    if len(data) < 8 or data[:4] != CLOUD_MAGIC:
        raise IngestionError(path, "not a point-cloud file (missing GPCD header)")
    count, = struct.unpack_from('<I', data, 4)
    if len(data) != 8 + count * CLOUD_RECORD.itemsize:
        raise IngestionError(path, "expected {} points, file has {} bytes".format(count, len(data)))
    records = np.frombuffer(data, dtype=CLOUD_RECORD, count=count, offset=8)
    try:
        return PointCloud(
            records['position'].astype(np.float64),
            records['color'].astype(np.float64) / 255,
            np.full(count, EXTERNAL_TAG)
        )
    except DataError as e:
        raise IngestionError(path, str(e))
