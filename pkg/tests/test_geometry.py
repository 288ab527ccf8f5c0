import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_camera, random_view
from errors import ConfigurationError, DataError, IngestionError, ParameterError, ShapeError, ValidationError, ViewIndexError
from geometry import BACKGROUND, EXTERNAL_TAG, TARGET_TAG, CameraParams, DepthMap, PointCloud, View, back_project, informative_mask, load_camera, load_depth, load_point_cloud, look_at, perturb_noise, project, render_reference_cloud, render_target_cloud, save_camera, save_depth, save_point_cloud, scene_cloud, sparsify

seeds = st.integers(min_value=0, max_value=2 ** 31 - 1)


def projection_oracle(cloud, cam):
    """Per-pixel nearest point by exhaustive search, lowest index on ties."""
    h, w = cam.shape
    image = np.full((h, w, 3), BACKGROUND)
    best = {}
    cam_points = cam.world_to_camera(cloud.points)
    for i, (x, y, z) in enumerate(cam_points):
        if z <= 1e-6:
            continue
        u = int(np.floor(cam.fx * x / z + cam.cx + 0.5))
        v = int(np.floor(cam.fy * y / z + cam.cy + 0.5))
        if not (0 <= u < w and 0 <= v < h):
            continue
        if (v, u) not in best or z < best[(v, u)][0]:
            best[(v, u)] = (z, i)
    coverage = np.zeros((h, w), dtype=bool)
    for (v, u), (z, i) in best.items():
        image[v, u] = cloud.colors[i]
        coverage[v, u] = True
    return image, coverage


def back_projection_oracle(depth, cam):
    """Pinhole inverse pixel by pixel, row-major over valid pixels."""
    points = []
    for v in range(cam.height):
        for u in range(cam.width):
            if not depth.valid[v, u]:
                continue
            z = depth.values[v, u]
            in_camera = np.array([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z])
            points.append(cam.rotation.T @ (in_camera - cam.translation))
    return np.array(points).reshape(-1, 3)


def test_look_at_produces_proper_rotation():
    cam = look_at((0, -4, 2), (0, 0, 0), (0, 0, 1), 60, 32, 24)
    assert np.allclose(cam.rotation @ cam.rotation.T, np.eye(3))
    assert cam.shape == (24, 32)
    assert np.allclose(cam.center, (0, -4, 2))
    # target projects to the principal point
    x, y, z = cam.world_to_camera(np.zeros((1, 3)))[0]
    assert cam.fx * x / z + cam.cx == pytest.approx(cam.cx)
    assert cam.fy * y / z + cam.cy == pytest.approx(cam.cy)


def test_camera_rejects_invalid_parameters():
    with pytest.raises(ValidationError):
        CameraParams(1.0, 1.0, 0, 0, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 4, 4)
    with pytest.raises(ValidationError):
        CameraParams(0.0, 1.0, 0, 0, np.eye(3), np.zeros(3), 4, 4)
    with pytest.raises(ValidationError):
        CameraParams(1.0, 1.0, 0, 0, np.eye(3) * 1.01, np.zeros(3), 4, 4)
    with pytest.raises(ShapeError):
        CameraParams(1.0, 1.0, 0, 0, np.eye(2), np.zeros(3), 4, 4)


def test_depth_validity_from_values():
    depth = DepthMap.from_values([[1.0, 0.0], [-2.0, np.nan]])
    assert depth.valid.tolist() == [[True, False], [False, False]]
    assert not DepthMap.from_values([[np.inf]]).valid.any()


def test_back_project_rejects_mismatched_inputs(rng):
    view = random_view(rng)
    with pytest.raises(ShapeError):
        back_project(DepthMap(np.ones((4, 4)), np.ones((4, 4))), view.camera, view.image)
    with pytest.raises(ShapeError):
        back_project(view.depth, view.camera, view.image[:, :, :2])
    bad = DepthMap(np.zeros((32, 32)), np.ones((32, 32)))
    with pytest.raises(DataError):
        back_project(bad, view.camera, view.image)


def test_back_project_single_pixel_identity_camera():
    cam = CameraParams(1.0, 1.0, 0.0, 0.0, np.eye(3), np.zeros(3), 1, 1)
    color = np.array([[[0.2, 0.4, 0.6]]])
    cloud = back_project(DepthMap([[1.0]], [[True]]), cam, color)
    assert cloud.points.tolist() == [[0.0, 0.0, 1.0]]
    assert cloud.colors.tolist() == [[0.2, 0.4, 0.6]]
    assert len(back_project(DepthMap([[1.0]], [[False]]), cam, color)) == 0


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_back_project_matches_pixel_formula(seed):
    rng = np.random.default_rng(seed)
    view = random_view(rng, size=16)
    cloud = back_project(view.depth, view.camera, view.image)
    expected = back_projection_oracle(view.depth, view.camera)
    assert cloud.points.shape == expected.shape
    assert np.abs(cloud.points - expected).max() < 1e-6
    assert np.array_equal(cloud.colors, view.image[view.depth.valid])


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_back_project_then_project_reproduces_view(seed):
    view = random_view(np.random.default_rng(seed))
    projected = project(back_project(view.depth, view.camera, view.image), view.camera)
    valid = view.depth.valid
    assert np.array_equal(projected.coverage, valid)
    assert np.abs(projected.depth_buffer[valid] - view.depth.values[valid]).max() < 1e-5
    assert np.array_equal(projected.image[valid], view.image[valid])
    assert np.all(projected.image[~valid] == BACKGROUND)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_zbuffer_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng)
    count = 400
    points = rng.uniform(-1.5, 1.5, size=(count, 3))
    # duplicated positions exercise the lowest-index tie break
    points[count // 2:count // 2 + 20] = points[:20]
    cloud = PointCloud(points, rng.random((count, 3)), np.zeros(count))
    projected = project(cloud, cam)
    image, coverage = projection_oracle(cloud, cam)
    assert np.array_equal(projected.coverage, coverage)
    assert np.array_equal(projected.image, image)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_adding_points_never_uncovers_or_deepens(seed):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng)
    base = PointCloud(rng.uniform(-1.5, 1.5, size=(200, 3)), rng.random((200, 3)), np.zeros(200))
    extra = PointCloud(rng.uniform(-1.5, 1.5, size=(100, 3)), rng.random((100, 3)), np.zeros(100))
    for radius in (1, 2):
        before = project(base, cam, splat_radius=radius)
        after = project(PointCloud.concat([base, extra]), cam, splat_radius=radius)
        assert np.all(after.coverage >= before.coverage)
        assert np.all(after.depth_buffer <= before.depth_buffer)


def test_points_behind_camera_are_ignored():
    cam = look_at((0, 0, 0), (0, 1, 0), (0, 0, 1), 60, 8, 8)
    cloud = PointCloud([[0, -1, 0], [0, 2, 0]], [[1, 0, 0], [0, 1, 0]], [0, 0])
    projected = project(cloud, cam)
    assert projected.coverage.sum() == 1
    assert projected.image[projected.coverage].tolist() == [[0.0, 1.0, 0.0]]


def test_splat_radius_covers_square():
    cam = look_at((0, 0, 0), (0, 1, 0), (0, 0, 1), 60, 9, 9)
    cloud = PointCloud([[0, 2, 0]], [[0, 0, 0]], [0])
    assert project(cloud, cam, splat_radius=1).coverage.sum() == 1
    covered = project(cloud, cam, splat_radius=2).coverage
    assert covered.sum() == 9
    assert covered[3:6, 3:6].all()
    with pytest.raises(ParameterError):
        project(cloud, cam, splat_radius=0)


def test_empty_cloud_projects_to_background():
    cam = look_at((0, 0, 0), (0, 1, 0), (0, 0, 1), 60, 4, 4)
    projected = project(PointCloud.empty(), cam)
    assert not projected.coverage.any()
    assert np.all(projected.image == BACKGROUND)
    assert np.all(np.isinf(projected.depth_buffer))


def test_co_located_reference_reproduces_itself_in_target(rng):
    view = random_view(rng)
    projected = render_target_cloud([view], view.camera)
    covered = projected.coverage
    assert np.array_equal(covered, view.depth.valid)
    assert np.array_equal(projected.image[covered], view.image[covered])


def test_disjoint_views_give_blank_target(rng):
    view = random_view(rng)
    away = look_at(view.camera.center, 2 * view.camera.center, (0, 0, 1), 60, 32, 32)
    projected = render_target_cloud([view], away)
    assert not projected.coverage.any()
    assert np.all(projected.image == BACKGROUND)


def test_reference_cloud_leaves_own_view_out(rng):
    first, second = random_view(rng), random_view(rng)
    target = random_view(rng)
    expected = project(PointCloud.concat([
        back_project(second.depth, second.camera, second.image),
        back_project(target.depth, target.camera, target.image)
    ]), first.camera)
    projected = render_reference_cloud([first, second], target, 0)
    assert np.array_equal(projected.image, expected.image)
    assert np.array_equal(projected.coverage, expected.coverage)
    with pytest.raises(ViewIndexError):
        render_reference_cloud([first, second], target, 2)
    with pytest.raises(ConfigurationError):
        render_target_cloud([], first.camera)


def test_informative_mask_is_uncovered_by_target(rng):
    view = random_view(rng, invalid_fraction=0.0)
    assert not informative_mask(view, view.camera).any()
    away = look_at(view.camera.center, 2 * view.camera.center, (0, 0, 1), 60, 32, 32)
    assert informative_mask(view, away).all()


def test_informative_mask_on_half_overlapping_plane(rng):
    # both cameras look straight down at z = 0 from height 3, offset by half a footprint
    target_cam = look_at((0, 0, 3), (0, 0, 0), (0, 1, 0), 60, 16, 16)
    ref_cam = look_at((1.73, 0, 3), (1.73, 0, 0), (0, 1, 0), 60, 16, 16)
    target = View(rng.random((16, 16, 3)), DepthMap(np.full((16, 16), 3.0), np.ones((16, 16), dtype=bool)), target_cam)
    r = informative_mask(target, ref_cam)
    _, coverage = projection_oracle(back_project(target.depth, target_cam, target.image), ref_cam)
    assert np.array_equal(r, (~coverage).astype(np.uint8))
    assert 0.3 < r.mean() < 0.7


def test_scene_cloud_tags_sources(rng):
    refs = [random_view(rng), random_view(rng)]
    target = random_view(rng)
    cloud = scene_cloud(refs, target)
    counts = [int(v.depth.valid.sum()) for v in refs + [target]]
    assert len(cloud) == sum(counts)
    assert (cloud.sources == 0).sum() == counts[0]
    assert (cloud.sources == 1).sum() == counts[1]
    assert (cloud.sources == TARGET_TAG).sum() == counts[2]
    assert len(cloud.with_sources([0, 1])) == counts[0] + counts[1]


def test_noise_moves_the_requested_share(rng):
    cloud = PointCloud(rng.random((101, 3)), rng.random((101, 3)), np.zeros(101))
    assert perturb_noise(cloud, 0.0, 0.1, rng) is cloud
    assert perturb_noise(cloud, 0.5, 0.0, rng) is cloud
    noisy = perturb_noise(cloud, 0.5, 0.1, rng)
    moved = np.any(noisy.points != cloud.points, axis=1)
    assert moved.sum() == 50
    assert np.array_equal(noisy.colors, cloud.colors)
    with pytest.raises(ParameterError):
        perturb_noise(cloud, 1.5, 0.1, rng)
    with pytest.raises(ParameterError):
        perturb_noise(cloud, 0.5, -1.0, rng)


def test_perturbations_replay_under_the_same_seed(rng):
    cloud = PointCloud(rng.random((100, 3)), rng.random((100, 3)), np.arange(100))
    first = perturb_noise(cloud, 0.5, 0.1, np.random.default_rng(7))
    second = perturb_noise(cloud, 0.5, 0.1, np.random.default_rng(7))
    assert np.array_equal(first.points, second.points)
    assert np.any(first.points != cloud.points, axis=1).sum() == 50
    assert np.array_equal(sparsify(cloud, 0.3, np.random.default_rng(7)).sources,
                          sparsify(cloud, 0.3, np.random.default_rng(7)).sources)


def test_sparsify_survivors_follow_the_seeded_draw():
    cloud = PointCloud(np.arange(24, dtype=np.float64).reshape(8, 3), np.zeros((8, 3)), np.arange(8))
    dropped = np.random.default_rng(11).choice(8, size=2, replace=False)
    survivors = [i for i in range(8) if i not in dropped]
    kept = sparsify(cloud, 0.25, np.random.default_rng(11))
    assert len(kept) == 6
    assert kept.sources.tolist() == survivors


def test_sparsify_drops_the_requested_share(rng):
    cloud = PointCloud(rng.random((10, 3)), rng.random((10, 3)), np.arange(10))
    assert len(sparsify(cloud, 0.35, rng)) == 7
    kept = sparsify(cloud, 0.5, rng).sources
    assert np.all(np.diff(kept) > 0)
    assert len(sparsify(cloud, 1.0, rng)) == 0


def test_depth_file_round_trip(tmp_path, rng):
    values = rng.uniform(0.5, 5.0, size=(6, 7)).astype(np.float32).astype(np.float64)
    valid = rng.random((6, 7)) > 0.3
    depth = DepthMap(np.where(valid, values, 0.0), valid)
    save_depth(tmp_path / 'd.gdpt', depth)
    assert load_depth(tmp_path / 'd.gdpt') == depth


def test_corrupt_depth_file(tmp_path):
    path = tmp_path / 'bad.gdpt'
    path.write_bytes(b'GDPT' + b'\x02\x00\x00\x00\x02\x00\x00\x00' + b'\x00' * 3)
    with pytest.raises(IngestionError) as info:
        load_depth(path)
    assert info.value.path == str(path)
    with pytest.raises(IngestionError):
        load_depth(tmp_path / 'missing.gdpt')


def test_camera_file_round_trip(tmp_path, rng):
    cam = random_camera(rng)
    save_camera(tmp_path / 'c.cam', cam)
    assert load_camera(tmp_path / 'c.cam') == cam


def test_camera_file_without_header(tmp_path):
    path = tmp_path / 'c.cam'
    path.write_text("fx = 10\nfy = 10\ncx = 1.5\ncy = 1.5\nwidth = 4\nheight = 4\n"
                    "rotation = 1 0 0 0 1 0 0 0 1\ntranslation = 0 0 0\n")
    cam = load_camera(path)
    assert cam.fx == 10.0 and cam.shape == (4, 4)
    path.write_text("fx = 10\nrotation = 1 0 0\n")
    with pytest.raises(IngestionError):
        load_camera(path)


def test_point_cloud_file_round_trip(tmp_path, rng):
    points = rng.uniform(-2, 2, size=(20, 3)).astype(np.float32).astype(np.float64)
    colors = np.round(rng.random((20, 3)) * 255) / 255
    save_point_cloud(tmp_path / 'p.gpcd', PointCloud(points, colors, np.zeros(20)))
    cloud = load_point_cloud(tmp_path / 'p.gpcd')
    assert np.array_equal(cloud.points, points)
    assert np.allclose(cloud.colors, colors)
    assert np.all(cloud.sources == EXTERNAL_TAG)


def test_point_cloud_rejects_non_finite():
    with pytest.raises(DataError):
        PointCloud([[np.nan, 0, 0]], [[0, 0, 0]], [0])


def test_view_is_plain_container(rng):
    view = random_view(rng)
    assert isinstance(view, View)
    assert view.depth.width == 32
