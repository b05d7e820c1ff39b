import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import inside_rect, sweep_min_rect_area
from sianms.boxfit import (FitConfig, FrustumBoxFitter, convex_hull, fit_box, fit_box_or_raise,
                           footprint_rectangle, ground_filter, min_area_rect_bev, nearest_cluster)
from sianms.exceptions import DegenerateFitError, EmptyFitError, ValidationError
from sianms.geometry import Ray
from sianms.scene import Box3D, normalize_angle
from sianms.simulator import sample_box_surface, visible_faces


def half_turn_diff(a, b):
    return abs(math.remainder(a - b, math.pi))


def rect_points(cx, cy, w, l, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    local = [(l / 2, w / 2), (-l / 2, w / 2), (-l / 2, -w / 2), (l / 2, -w / 2)]
    return np.array([(cx + c * a - s * b, cy + s * a + c * b) for a, b in local])


# ----------------------------------------------------------------------------- filters

def test_ground_filter_examples():
    flat = np.column_stack([np.arange(5.0), np.zeros(5), np.zeros(5)])
    assert len(ground_filter(flat)) == 0
    up = flat + [0, 0, 1]
    assert np.array_equal(ground_filter(up), up)
    mixed = np.vstack([flat, up])
    assert np.array_equal(ground_filter(mixed), mixed[mixed[:, 2] > 0.3])


def test_nearest_cluster_examples():
    rng = np.random.default_rng(0)
    near = np.column_stack([rng.uniform(10, 11, 20), rng.uniform(-1, 1, 20), np.ones(20)])
    far = near + [5.0 + 1.0, 0, 0]
    assert len(nearest_cluster(near)) == 20
    got = nearest_cluster(np.vstack([far, near]))
    assert np.allclose(np.sort(got[:, 0]), np.sort(near[:, 0]))
    with pytest.raises(EmptyFitError):
        nearest_cluster(near[:3])


def test_small_leading_cluster_is_skipped():
    noise = np.array([[5.0, 0, 1], [5.2, 0, 1]])
    body = np.column_stack([np.linspace(10, 12, 10), np.zeros(10), np.ones(10)])
    assert len(nearest_cluster(np.vstack([noise, body]))) == 10


# ----------------------------------------------------------------------------- rectangles

def test_axis_aligned_rectangle():
    center, size, yaw = min_area_rect_bev(rect_points(1, 2, 2, 4, 0))
    assert center == pytest.approx((1, 2))
    assert size == pytest.approx((2, 4))
    assert yaw == pytest.approx(0, abs=1e-12)


def test_rotated_rectangle():
    center, size, yaw = min_area_rect_bev(rect_points(-3, 5, 2, 4, math.radians(30)))
    assert center == pytest.approx((-3, 5), abs=1e-9)
    assert size == pytest.approx((2, 4), abs=1e-9)
    assert half_turn_diff(yaw, math.radians(30)) < 1e-9


def test_degenerate_inputs():
    with pytest.raises(DegenerateFitError):
        min_area_rect_bev([[0, 0], [1, 1], [2, 2], [3, 3]])
    with pytest.raises(DegenerateFitError):
        min_area_rect_bev([[0, 0], [1, 1]])


def test_hull_counter_clockwise():
    hull = convex_hull(rect_points(0, 0, 2, 4, 0.3).tolist() + [[0, 0]])
    assert len(hull) == 4
    x, y = hull[:, 0], hull[:, 1]
    assert np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)) > 0


def test_min_area_against_angle_sweep():
    rng = np.random.default_rng(1)
    for _ in range(40):
        pts = rng.normal(0, 1, (30, 2)) * rng.uniform(0.5, 3, 2)
        _, (w, l), _ = min_area_rect_bev(pts)
        swept = sweep_min_rect_area(pts, steps=3600)
        assert w * l <= swept + 1e-9
        assert w * l >= swept * (1 - 2e-3)


@settings(max_examples=100, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(-20, 20), st.floats(-20, 20),
       st.integers(0, 10_000))
def test_rectangle_equivariance(theta, tx, ty, seed):
    pts = np.random.default_rng(seed).normal(0, 2, (25, 2))
    c0, s0, y0 = min_area_rect_bev(pts)
    R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    c1, s1, y1 = min_area_rect_bev(pts @ R.T + [tx, ty])
    assert s1 == pytest.approx(s0, abs=1e-7)
    assert c1 == pytest.approx(R @ c0 + [tx, ty], abs=1e-7)
    if abs(s0[1] - s0[0]) > 1e-6:
        assert half_turn_diff(y1, y0 + theta) < 1e-7


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.0, 0.2]))
def test_rectangle_encloses_points(seed, tol):
    pts = np.random.default_rng(seed).normal(0, 3, (40, 2))
    (cx, cy), (w, l), yaw = footprint_rectangle(pts, tol)
    assert inside_rect(pts[:, 0], pts[:, 1], cx, cy, w + 1e-9, l + 1e-9, yaw).all()


def test_area_tolerance_resolves_l_shape():
    # two full faces of a 1.8 x 4.5 box: the hypotenuse rectangle is nearly as small
    rng = np.random.default_rng(2)
    box = Box3D((20, 8, 0.8), (1.8, 4.5, 1.6), 0.5)
    pts = sample_box_surface(box, 400, rng)[:, :2]
    (cx, cy), size, yaw = footprint_rectangle(pts, 0.2)
    assert math.dist((cx, cy), box.center[:2]) < 0.05
    assert half_turn_diff(yaw, box.yaw) < math.radians(1)
    with pytest.raises(ValidationError):
        FitConfig(area_tolerance=-0.1)


# ----------------------------------------------------------------------------- full fit

def test_dense_surface_samples_recover_box():
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 50:
        r, bearing = rng.uniform(8, 45), rng.uniform(-math.pi, math.pi)
        box = Box3D((r * math.cos(bearing), r * math.sin(bearing), 0.8),
                    (rng.uniform(1.6, 2.1), rng.uniform(3.8, 5.0), 1.6), rng.uniform(-math.pi, math.pi))
        if len(visible_faces(box)) < 2:
            continue
        pts = sample_box_surface(box, 600, rng)
        axis = Ray.from_angle((0.0, 0.0), bearing + rng.uniform(-0.1, 0.1))
        fit = fit_box(pts, axis, score=0.7)
        assert fit is not None
        assert math.dist(fit.center[:2], box.center[:2]) < 0.05
        assert half_turn_diff(fit.yaw, box.yaw) < math.radians(1)
        assert fit.score == 0.7
        checked += 1


def test_empty_and_sparse_frustums():
    axis = Ray.from_angle((0, 0), 0.0)
    assert fit_box(np.zeros((0, 3)), axis) is None
    with pytest.raises(EmptyFitError):
        fit_box_or_raise(np.zeros((0, 3)), axis)
    assert fit_box([[10, 0, 1], [10.5, 0, 1], [11, 0.2, 1]], axis) is None


def test_fit_is_deterministic():
    rng = np.random.default_rng(4)
    pts = sample_box_surface(Box3D((15, 5, 0.8), (1.8, 4.5, 1.6), 1.0), 300, rng)
    axis = Ray.from_angle((0, 0), math.atan2(5, 15))
    assert fit_box(pts, axis) == fit_box(pts.copy(), axis)


def test_estimator_wrapper():
    fitter = FrustumBoxFitter(min_points=3)
    assert fitter.get_params()["min_points"] == 3
    assert fitter.config == FitConfig(min_points=3)
    pts = sample_box_surface(Box3D((15, 0, 0.8), (1.8, 4.5, 1.6), 0.7),
                             200, np.random.default_rng(5))
    box = fitter.fit().predict(pts, Ray.from_angle((0, 0), 0.0))
    assert box is not None and normalize_angle(box.yaw) == box.yaw
