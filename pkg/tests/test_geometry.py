import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weathermoe import geometry as geo
from weathermoe.nncore import Rng
from weathermoe.oracles import mc_iou, pixel_to_ego_oracle

Box = geo.Box3D


def test_box_validation_and_yaw_wrap():
    with pytest.raises(ValueError):
        Box(0, 0, 0, 0, 1, 1)
    with pytest.raises(ValueError):
        Box(float("nan"), 0, 0, 1, 1, 1)
    assert Box(0, 0, 0, 1, 1, 1, 3 * math.pi).yaw == pytest.approx(math.pi)


def test_iou_reference_cases():
    a = Box(0, 0, 0, 2, 2, 2)
    assert geo.iou_3d(a, a) == pytest.approx(1.0)
    assert geo.bev_iou(a, Box(10, 0, 0, 2, 2, 2)) == 0.0
    # half overlap along x: inter 1*2, union 6
    assert geo.bev_iou(a, Box(1, 0, 0, 2, 2, 2)) == pytest.approx(2 / 6)
    # a square rotated by 90 degrees is itself
    assert geo.bev_iou(a, Box(0, 0, 0, 2, 2, 2, math.pi / 2)) == pytest.approx(1.0)
    # vertical half offset: bev 1, 3d 1/3
    b = Box(0, 0, 1, 2, 2, 2)
    assert geo.bev_iou(a, b) == pytest.approx(1.0)
    assert geo.iou_3d(a, b) == pytest.approx(1 / 3)


def test_iou_45_degree_square():
    a = Box(0, 0, 0, 2, 2, 1)
    b = Box(0, 0, 0, 2, 2, 1, math.pi / 4)
    inter = 8 * (math.sqrt(2) - 1)  # regular octagon inside the unit square
    assert geo.bev_iou(a, b) == pytest.approx(inter / (8 - inter))


def test_polygon_area_and_clip():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    assert geo.polygon_area(sq) == pytest.approx(1.0)
    clipped = geo.clip_convex(sq, sq + 0.5)
    assert geo.polygon_area(clipped) == pytest.approx(0.25)


def _rand_box(r: Rng):
    return Box(r.uniform(-1.5, 1.5), r.uniform(-1.5, 1.5), r.uniform(-0.5, 0.5), r.uniform(0.5, 4),
               r.uniform(0.5, 2.5), r.uniform(0.5, 2), r.uniform(-3.1, 3.1))


def test_iou_matches_monte_carlo_on_a_few_pairs():
    r = Rng(9)
    for _ in range(5):
        a, b = _rand_box(r), _rand_box(r)
        assert abs(geo.bev_iou(a, b) - mc_iou(a.to_array(), b.to_array(), 300_000, r, dims=2)) < 0.01
        assert abs(geo.iou_3d(a, b) - mc_iou(a.to_array(), b.to_array(), 300_000, r, dims=3)) < 0.01


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32))
def test_iou_symmetric_bounded(seed):
    r = Rng(seed)
    a, b = _rand_box(r), _rand_box(r)
    v = geo.iou_3d(a, b)
    assert 0.0 <= v <= 1.0 + 1e-12
    assert v == pytest.approx(geo.iou_3d(b, a), abs=1e-12)
    assert geo.iou_3d(a, b) <= geo.bev_iou(a, b) + 1e-12 or a.z != b.z


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32), st.floats(-10, 10), st.floats(-10, 10), st.floats(-math.pi, math.pi))
def test_iou_invariant_under_rigid_motion(seed, tx, ty, th):
    r = Rng(seed)
    a, b = _rand_box(r), _rand_box(r)

    def move(box):
        c, s = math.cos(th), math.sin(th)
        return Box(c * box.x - s * box.y + tx, s * box.x + c * box.y + ty, box.z, box.dx, box.dy, box.dz,
                   box.yaw + th)

    assert geo.iou_3d(move(a), move(b)) == pytest.approx(geo.iou_3d(a, b), abs=1e-9)


def test_points_in_box():
    box = Box(1, 1, 0, 2, 1, 1, math.pi / 2)
    pts = np.array([[1, 1.9, 0], [1.4, 1, 0], [1.6, 1, 0], [1, 1, 0.6]])
    assert geo.points_in_box(pts, box).tolist() == [True, True, False, False]


def test_rigid_helpers():
    t = geo.rigid_transform(geo.yaw_rotation(0.7), [1, 2, 3])
    assert geo.is_rigid(t)
    np.testing.assert_allclose(geo.invert_rigid(t) @ t, np.eye(4), atol=1e-12)
    assert not geo.is_rigid(np.diag([2.0, 1, 1, 1]))


# ------------------------------------------------------------ camera chain


def test_identity_chain_is_exact():
    p = geo.transform_pixel_to_ego(3.0, 4.0, 5.0, np.eye(3), np.eye(4))
    assert p.tolist() == [15.0, 20.0, 5.0]


def _random_calibration(r: Rng):
    f = r.uniform(30, 120)
    a = np.array([[f, 0, r.uniform(20, 70)], [0, f * r.uniform(0.9, 1.1), r.uniform(20, 40)], [0, 0, 1]])
    t_ext = geo.camera_to_ego(r.uniform(1.0, 2.0), r.uniform(-1, 1))
    t_ext = geo.rigid_transform(geo.yaw_rotation(r.uniform(-0.2, 0.2)), [0, 0, 0]) @ t_ext
    t_img = geo.rigid_transform(np.eye(3), [r.uniform(-3, 3), r.uniform(-3, 3), 0])
    t_lid = geo.rigid_transform(geo.yaw_rotation(r.uniform(-0.5, 0.5)), [r.uniform(-1, 1), r.uniform(-1, 1), 0])
    return a, t_ext, t_img, t_lid


def test_chain_matches_stepwise_oracle():
    r = Rng(4)
    for _ in range(20):
        a, t_ext, t_img, t_lid = _random_calibration(r)
        u, v, d = r.uniform(0, 96), r.uniform(0, 64), r.uniform(1, 40)
        got = geo.transform_pixel_to_ego(u, v, d, a, t_ext, t_img, t_lid)
        np.testing.assert_allclose(got, pixel_to_ego_oracle(u, v, d, a, t_ext, t_img, t_lid), atol=1e-6)


def test_project_unproject_roundtrip():
    cam = geo.CameraIntrinsics.from_fov(96, 64, 90)
    t_ext = geo.camera_to_ego(1.6)
    p = np.array([12.0, -3.0, 0.5])
    proj = geo.project_to_pixel(p, cam, t_ext)
    assert proj.ok
    back = geo.transform_pixel_to_ego(proj.u, proj.v, proj.depth, cam.matrix, t_ext)
    np.testing.assert_allclose(back, p, atol=1e-9)


def test_projection_statuses_and_errors():
    cam = geo.CameraIntrinsics.from_fov(96, 64, 90)
    t_ext = geo.camera_to_ego(1.6)
    assert geo.project_to_pixel([-5.0, 0, 1], cam, t_ext).status == "behind_camera"
    assert geo.project_to_pixel([5.0, 30.0, 1], cam, t_ext).status == "out_of_frame"
    with pytest.raises(ValueError):
        geo.transform_pixel_to_ego(1, 1, 0.0, cam.matrix, t_ext)
    with pytest.raises(ValueError):
        geo.pixel_to_ego_matrix(np.zeros((3, 3)), t_ext)


# --------------------------------------------------------------- fusion


def test_weighted_box_mean_reference():
    a = Box(0, 0, 0, 4, 2, 1.5, 0.1)
    b = Box(1, 0, 0, 4, 2, 1.5, 0.1)
    fused = geo.weighted_box_mean([(a, 0.8), (b, 0.2)])
    assert fused.x == pytest.approx(0.2) and fused.y == 0 and fused.yaw == pytest.approx(0.1)
    assert geo.weighted_box_mean([(a, 3.0)]) is a


def test_weighted_box_mean_flips_opposed_yaw():
    a = Box(0, 0, 0, 4, 2, 1.5, 0.0)
    b = Box(0, 0, 0, 4, 2, 1.5, math.pi)
    fused = geo.weighted_box_mean([(a, 0.6), (b, 0.4)])
    assert fused.yaw == pytest.approx(0.0, abs=1e-12)


def test_weighted_box_mean_rejects_bad_weights():
    with pytest.raises(ValueError):
        geo.weighted_box_mean([])
    with pytest.raises(ValueError):
        geo.weighted_box_mean([(Box(0, 0, 0, 1, 1, 1), 0.0), (Box(0, 0, 0, 1, 1, 1), 1.0)])
