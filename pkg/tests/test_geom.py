import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from lanevec import geom
from oracles import (
    arc_walk_resample, brute_mbr_area, dense_distance, minimal_rects, path_length, shoelace,
)

UNIT = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)

coord = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@st.composite
def polylines(draw, min_size=2, max_size=8):
    n = draw(st.integers(min_size, max_size))
    pts = np.array(draw(st.lists(st.tuples(coord, coord), min_size=n, max_size=n)))
    steps = np.hypot(*np.diff(pts, axis=0).T)
    assume(np.all(steps > 1e-3))
    return pts


# ---- resample_polyline

def test_resample_straight_line():
    out = geom.resample_polyline([[0, 0], [1, 0]], 3)
    np.testing.assert_allclose(out, [[0, 0], [0.5, 0], [1, 0]])


def test_resample_identity_on_uniform_input():
    pts = np.array([[0, 0], [1, 0], [2, 0], [3, 0]], float)
    np.testing.assert_array_equal(geom.resample_polyline(pts, 4), pts)


def test_resample_l_shape_matches_arc_walk():
    pts = [[0, 0], [1, 0], [1, 1]]
    out = geom.resample_polyline(pts, 5)
    np.testing.assert_allclose(out, arc_walk_resample(pts, 5), atol=2e-6)
    np.testing.assert_allclose(out, [[0, 0], [0.5, 0], [1, 0], [1, 0.5], [1, 1]], atol=1e-12)


def test_resample_degenerate_raises():
    with pytest.raises(geom.GeometryError):
        geom.resample_polyline([[1, 1], [1, 1]], 4)
    with pytest.raises(geom.GeometryError):
        geom.resample_polyline([[0, 0], [1, 1]], 1)


@given(polylines(), st.integers(2, 40))
def test_resample_keeps_endpoints_and_is_uniform(pts, n):
    out = geom.resample_polyline(pts, n)
    assert len(out) == n
    np.testing.assert_array_equal(out[0], pts[0])
    np.testing.assert_array_equal(out[-1], pts[-1])
    # output samples sit at equal arc-length positions of the input path
    ref = arc_walk_resample(pts, n, step=path_length(pts) / 2e5)
    np.testing.assert_allclose(out, ref, atol=path_length(pts) / 1e5)


@given(polylines())
def test_resample_preserves_length_on_straight_runs(pts):
    # resampling a two-point segment keeps its length exactly
    a, b = pts[0], pts[1]
    out = geom.resample_polyline([a, b], 7)
    assert math.isclose(geom.polyline_length(out), math.hypot(*(b - a)), rel_tol=1e-9)


# ---- min_bounding_rect

def test_mbr_unit_square():
    r = geom.min_bounding_rect([UNIT])
    assert math.isclose(shoelace(r), 1.0, rel_tol=1e-12)
    assert {tuple(np.round(v, 9)) for v in r} == {tuple(v) for v in UNIT}


def test_mbr_rotated_square_is_itself():
    sq = geom.rotate(UNIT, math.pi / 4)
    r = geom.min_bounding_rect([sq])
    assert math.isclose(shoelace(r), 1.0, rel_tol=1e-9)
    got = sorted(map(tuple, np.round(r, 9)))
    assert got == sorted(map(tuple, np.round(sq, 9)))


def test_mbr_random_points_match_orientation_sweep():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(100, 2)) * [3, 1]
    r = geom.min_bounding_rect([pts])
    assert math.isclose(shoelace(r), brute_mbr_area(pts), rel_tol=1e-9)
    inside, dist = geom.points_to_polygon(pts, r)
    assert np.all(inside | (dist < 1e-9))


def test_mbr_collinear_inflated_and_errors():
    r = geom.min_bounding_rect([[[0, 0], [1, 1], [3, 3]]])
    length = math.hypot(3, 3)
    assert math.isclose(shoelace(r), length * 2e-6 * length, rel_tol=1e-6)
    with pytest.raises(geom.GeometryError):
        geom.min_bounding_rect([])
    with pytest.raises(geom.GeometryError):
        geom.min_bounding_rect([[[1, 1], [1, 1]]])


@given(st.integers(0, 10_000), st.floats(0, 2 * math.pi))
def test_mbr_rotation_invariant(seed, theta):
    pts = np.random.default_rng(seed).uniform(-5, 5, size=(12, 2))
    r0 = geom.min_bounding_rect([pts])
    r1 = geom.min_bounding_rect([geom.rotate(pts, theta)])
    assert math.isclose(shoelace(r0), shoelace(r1), rel_tol=1e-6, abs_tol=1e-9)
    # with area ties several rectangles are minimal; the rotated output must be one of them
    def same(a, b):
        return all(np.min(np.hypot(*(b - v).T)) < 1e-6 for v in a)

    options = minimal_rects(pts)
    assert any(same(r0, o) for o in options)
    assert any(same(r1, geom.rotate(o, theta)) for o in options)


@given(st.integers(0, 10_000))
def test_mbr_area_matches_brute_force(seed):
    pts = np.random.default_rng(seed).normal(size=(15, 2))
    r = geom.min_bounding_rect([pts])
    assert math.isclose(shoelace(r), brute_mbr_area(pts), rel_tol=1e-8)
    assert geom.signed_area(r) > 0


# ---- point_to_polygon

def test_point_to_polygon_examples():
    assert geom.point_to_polygon((0.5, 0.5), UNIT) == (True, 0.5)
    assert geom.point_to_polygon((2, 0.5), UNIT) == (False, 1.0)
    assert geom.point_to_polygon((1, 1), UNIT) == (True, 0.0)
    assert geom.point_to_polygon((0.5, 0.0), UNIT) == (True, 0.0)


@given(st.floats(0.01, 0.99), st.floats(0, 2 * math.pi))
def test_point_to_polygon_ray_transition(start, angle):
    # walking outward from an interior point, the inside flag flips where distance hits 0
    p0 = np.array([start, 0.5])
    direction = np.array([math.cos(angle), math.sin(angle)])
    ts = np.linspace(0, 2, 4001)
    flags, dists = geom.points_to_polygon(p0 + ts[:, None] * direction, UNIT)
    first_out = int(np.argmax(~flags))
    assert not flags[first_out]
    assert dists[first_out] <= 2 * (ts[1] - ts[0])
    assert np.all(dists[:first_out] >= 0)


@given(coord, coord)
def test_point_to_polygon_zero_iff_boundary(x, y):
    x, y = x / 25, y / 25
    inside, d = geom.point_to_polygon((x, y), UNIT)
    # exact distance to the unit square boundary
    dx, dy = max(-x, 0.0, x - 1), max(-y, 0.0, y - 1)
    true_d = math.hypot(dx, dy) if (dx or dy) else min(x, 1 - x, y, 1 - y)
    # boundary band of width BOUNDARY_TOL counts as on the boundary
    assert (d == 0.0) == (true_d <= geom.BOUNDARY_TOL)
    if d:
        assert math.isclose(d, true_d, rel_tol=1e-9)
    assert inside == ((0 <= x <= 1) and (0 <= y <= 1) or true_d <= geom.BOUNDARY_TOL)


# ---- segment_to_polyline_distance

def test_segment_distance_examples():
    assert geom.segment_to_polyline_distance([[0, 0], [1, 0]], [[-5, 1], [5, 1]]) == 1.0
    assert geom.segment_to_polyline_distance([[0, 0], [1, 0]], [[-1, 0], [2, 0]]) == 0.0


def test_segment_distance_matches_dense_sampling():
    rng = np.random.default_rng(3)
    zigzag = np.array([[0, 0], [1, 1], [2, 0], [3, 1], [4, 0]], float)
    for _ in range(20):
        seg = rng.uniform(-1, 5, size=(2, 2))
        got = geom.segment_to_polyline_distance(seg, zigzag)
        ref = dense_distance(seg.mean(0), zigzag, 1e-4)
        assert abs(got - ref) < 1e-4
        assert got <= ref + 1e-6


# ---- polygon_iou

def test_polygon_iou_examples():
    assert geom.polygon_iou(UNIT, UNIT) == 1.0
    assert geom.polygon_iou(UNIT, UNIT + 5) == 0.0
    assert math.isclose(geom.polygon_iou(UNIT, UNIT + [0.5, 0]), 1 / 3, rel_tol=1e-12)
    assert math.isclose(geom.polygon_iou(UNIT, UNIT + [0.5, 0.5]), 0.25 / 1.75, rel_tol=1e-12)


@given(st.integers(0, 10_000))
def test_polygon_iou_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a = geom.min_bounding_rect([rng.normal(size=(6, 2))])
    b = geom.min_bounding_rect([rng.normal(size=(6, 2))])
    ab, ba = geom.polygon_iou(a, b), geom.polygon_iou(b, a)
    assert math.isclose(ab, ba, abs_tol=1e-12)
    assert 0.0 <= ab <= 1.0


# ---- edge_unit_vectors

def test_edge_unit_vectors_examples():
    np.testing.assert_allclose(geom.edge_unit_vectors([[0, 0], [2, 0]]), [[1, 0]])
    np.testing.assert_allclose(geom.edge_unit_vectors([[0, 0], [0, 3], [4, 3]]), [[0, 1], [1, 0]])
    with pytest.raises(geom.GeometryError):
        geom.edge_unit_vectors([[0, 0], [0, 0]])


@given(polylines())
def test_edge_unit_vectors_norm_and_reversal(pts):
    v = geom.edge_unit_vectors(pts)
    np.testing.assert_allclose(np.hypot(*v.T), 1.0, atol=1e-9)
    np.testing.assert_allclose(geom.edge_unit_vectors(pts[::-1]), -v[::-1], atol=1e-12)


# ---- helpers used by eval and synth

def test_split_by_length_trailing_weight():
    pieces = geom.split_by_length([[0, 0], [2.5, 0]], 1.0)
    assert [w for _, w in pieces] == [1.0, 1.0, 0.5]
    np.testing.assert_allclose(pieces[-1][0], [[2, 0], [2.5, 0]])


def test_clip_polyline_to_rect_pieces():
    pieces = geom.clip_polyline_to_rect([[-1, 0.5], [2, 0.5], [2, 2], [0.5, 2], [0.5, 0.7]], 0, 0, 1, 1)
    assert len(pieces) == 2
    np.testing.assert_allclose(pieces[0], [[0, 0.5], [1, 0.5]])
    np.testing.assert_allclose(pieces[1], [[0.5, 1], [0.5, 0.7]])


def test_as_polygon_orients_ccw():
    cw = UNIT[::-1]
    assert geom.signed_area(geom.as_polygon(cw)) > 0
    with pytest.raises(geom.GeometryError):
        geom.as_polygon([[0, 0], [1, 1], [2, 2]])
