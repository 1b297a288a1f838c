import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lanevec import geom
from lanevec.mapmodel import (
    CLASSES, CROSSWALK, LANE_DASHED, LANE_SOLID, N_CLS, ElementInstance, LaneGroup, MapFormatError,
    TileFrame, VectorMap, merge_instances, organize_groups, parse_map, parse_records,
    pixel_to_world, serialize_map, world_to_pixel,
)
from oracles import path_length
from worlds import vector_maps

GOLDEN = Path(__file__).parent / "data" / "golden_map.jsonl"


def lane(points, cls=LANE_SOLID, iid="e", score=1.0):
    return ElementInstance(np.asarray(points, float), cls, score, iid)


def golden_map() -> VectorMap:
    a = lane(geom.resample_polyline([[0, 0], [10, 0]], 4), iid="r0.s0.l0")
    b = lane(geom.resample_polyline([[0, 3.5], [10, 3.5]], 4), LANE_DASHED, "r0.s0.l1", 0.875)
    cw = ElementInstance(np.array([[2, 0.5], [4, 0.5], [4, 3], [2, 3]], float), CROSSWALK, 1.0, "r0.s0.c0")
    g = LaneGroup("r0.s0", (a, b, cw), geom.min_bounding_rect([a.points, b.points]))
    return VectorMap((g,), ((0, 0), (0, 1)), 0.04, 4)


def test_taxonomy():
    assert N_CLS == 5
    assert [c.name for c in CLASSES] == ["lane_solid", "lane_dashed", "stop_line", "crosswalk",
                                        "group_polygon"]
    assert [c.closed for c in CLASSES] == [False, False, False, True, True]


# ---- frames

def test_pixel_world_examples():
    f = TileFrame(origin_world=(100.0, -20.0), pixel_size=0.04)
    np.testing.assert_array_equal(pixel_to_world([0, 0], f), [100.0, -20.0])
    np.testing.assert_allclose(pixel_to_world([25, 0], f), [101.0, -20.0], atol=1e-12)


@given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4), st.floats(0.01, 1.0), st.integers(0, 10_000))
def test_pixel_world_round_trip(ox, oy, px, seed):
    f = TileFrame(origin_world=(ox, oy), pixel_size=px)
    pts = np.random.default_rng(seed).uniform(-500, 500, size=(1000, 2))
    back = world_to_pixel(pixel_to_world(pts, f), f)
    np.testing.assert_allclose(pixel_to_world(back, f), pixel_to_world(pts, f), atol=1e-9)


def test_frame_rejects_bad_pixel_size():
    with pytest.raises(ValueError):
        TileFrame(origin_world=(0, 0), pixel_size=0)


# ---- file format

def test_empty_map_is_header_only():
    data = serialize_map(VectorMap())
    assert data.count(b"\n") == 1 and b'"header"' in data
    assert parse_map(data) == VectorMap()


def test_single_lane_round_trip():
    e = lane(geom.resample_polyline([[0, 0], [3, 1]], 10), iid="x")
    m = VectorMap((LaneGroup("g", (e,), geom.min_bounding_rect([e.points])),), ((0, 0),), 0.04, 10)
    assert parse_map(serialize_map(m)) == m


def test_golden_file():
    assert serialize_map(golden_map()) == GOLDEN.read_bytes()
    assert parse_map(GOLDEN.read_bytes()) == golden_map()


@given(vector_maps())
def test_round_trip_property(m):
    assert parse_map(serialize_map(m)) == m


@pytest.mark.parametrize("text,line", [
    ("not json\n", 1),
    ('{"kind":"group","group_id":"g","polygon":[[0,0],[1,0],[0,1]]}\n', 1),
    ('{"kind":"header","format_version":99,"pixel_size":0.04,"n_points":2}\n', 1),
    ('{"kind":"header","format_version":1,"pixel_size":0.04,"n_points":2}\n'
     '{"kind":"element","group_id":"zz","instance_id":"a","cls":0,"score":1,"points":[[0,0],[1,1]]}\n', 2),
    ('{"kind":"header","format_version":1,"pixel_size":0.04,"n_points":2}\n'
     '{"kind":"group","group_id":"g","polygon":[[0,0],[1,0],[0,1]]}\n'
     '{"kind":"element","group_id":"g","instance_id":"a","cls":"x","score":1,"points":[[0,0],[1,1]]}\n', 3),
])
def test_malformed_input_reports_line(text, line):
    with pytest.raises(MapFormatError) as exc:
        parse_map(text)
    assert exc.value.line == line
    assert f"line {line}" in str(exc.value)


def test_extra_records_pass_through():
    data = serialize_map(VectorMap(), [{"kind": "topology", "row_ids": [], "col_ids": [], "values": []}])
    _, extras = parse_records(data)
    assert extras["topology"][0]["row_ids"] == []


# ---- organize_groups

def box(x0, y0, x1, y1):
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], float)


def test_organize_groups_counts():
    A, B = box(0, 0, 10, 10), box(20, 0, 30, 10)
    elems = [lane([[1, y], [9, y]], iid=f"a{y}") for y in (2, 5, 8)]
    elems += [lane([[21, y], [29, y]], iid=f"b{y}") for y in (3, 7)]
    groups = organize_groups(elems, [(A, 0.9), (B, 0.8)])
    assert sorted(len(g.elements) for g in groups) == [2, 3]
    by_id = {g.group_id: g for g in groups}
    assert len(by_id["g0"].elements) == 3 and by_id["g0"].score == 0.9


def test_organize_groups_no_polygons():
    elems = [lane([[0, 0], [1, 0]], iid="a"), lane([[0, 5], [1, 6]], iid="b")]
    groups = organize_groups(elems, [])
    assert len(groups) == 2 and all(len(g.elements) == 1 for g in groups)
    for g in groups:
        inside, _ = geom.points_to_polygon(g.elements[0].points, g.polygon)
        assert inside.all()


def test_organize_groups_majority():
    A, B = box(0, 0, 6, 10), box(6.5, 0, 12, 10)
    pts = np.array([[x, 5.0] for x in (0.5, 1.5, 2.5, 3.5, 4.5, 5.5, 7, 8, 9, 10)])
    groups = organize_groups([lane(pts, iid="s")], [(A, 1.0), (B, 1.0)])
    assert [g.group_id for g in groups] == ["g0"]


@given(st.integers(0, 10_000))
def test_organize_groups_total(seed):
    rng = np.random.default_rng(seed)
    elems = [lane(rng.uniform(0, 20, size=(5, 2)), iid=f"e{i}") for i in range(rng.integers(0, 8))]
    polys = [(geom.min_bounding_rect([rng.uniform(0, 20, size=(4, 2))]), 0.5)
             for _ in range(rng.integers(0, 3))]
    groups = organize_groups(elems, polys)
    ids = [e.instance_id for g in groups for e in g.elements]
    assert sorted(ids) == sorted(e.instance_id for e in elems)


# ---- merge_instances

def test_merge_end_to_start():
    a = lane(geom.resample_polyline([[0, 0], [10, 0]], 5), iid="a", score=0.9)
    b = lane(geom.resample_polyline([[10, 0], [20, 0]], 5), iid="b", score=0.7)
    m = merge_instances(a, b)
    assert len(m.points) == 5 and m.score == 0.7
    np.testing.assert_allclose(m.points[[0, -1]], [[0, 0], [20, 0]])
    assert math.isclose(path_length(m.points), 20.0)
    assert m.sources == ("a", "b")


def test_merge_flips_reversed_partner():
    a = lane([[0, 0], [10, 0]], iid="a")
    b = lane([[20, 0], [10, 0]], iid="b")
    m = merge_instances(a, b, 3)
    np.testing.assert_allclose(m.points, [[0, 0], [10, 0], [20, 0]])


def test_merge_chain_of_three_unit_segments():
    segs = [lane(geom.resample_polyline([[i, 0], [i + 1, 0]], 20), iid=f"s{i}") for i in range(3)]
    m = merge_instances(merge_instances(segs[0], segs[1]), segs[2])
    assert abs(path_length(m.points) - 3.0) < 1e-6
    assert m.sources == ("s0", "s1", "s2")


def test_merge_rejects_closed_and_mismatch():
    cw = ElementInstance(box(0, 0, 1, 1), CROSSWALK, 1.0, "c")
    with pytest.raises(ValueError):
        merge_instances(cw, lane([[1, 0], [2, 0]]))
    with pytest.raises(ValueError):
        merge_instances(lane([[0, 0], [1, 0]]), lane([[1, 0], [2, 0]], LANE_DASHED))


@given(st.floats(0.2, 3.0), st.floats(-0.05, 0.05))
def test_merge_preserves_length_on_smooth_curves(radius_scale, k):
    # two halves of one arc, each resampled to 20 points
    r = 50.0 * radius_scale
    th = np.linspace(0, 0.6, 200)
    arc = np.c_[r * np.sin(th), r * (1 - np.cos(th))] + k
    a = lane(geom.resample_polyline(arc[:100], 20), iid="a")
    b = lane(geom.resample_polyline(arc[99:], 20), iid="b")
    m = merge_instances(a, b, 20)
    total = path_length(a.points) + path_length(b.points)
    assert abs(path_length(m.points) - total) / total < 5e-3
