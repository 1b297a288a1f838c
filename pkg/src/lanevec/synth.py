"""Procedural lane-level worlds and their rasterization into training tiles."""
from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import geom
from .mapmodel import (
    CROSSWALK, LANE_DASHED, LANE_SOLID, STOP_LINE, ElementInstance, LaneGroup,
    TileFrame, TopologyMatrix, VectorMap, is_closed, parse_records, serialize_map,
    topology_record, transform_element,
)

BACKGROUND = 0.15
ROAD = 0.4
MARKING = 1.0
OCCLUSION = 0.05
NOISE_SIGMA = 0.02
STROKE_HALF_WIDTH_PX = 1.0
MIN_PIECE_M = 1.0
LINK_TOL_M = 1e-5
DATASET_VERSION = 1


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class RoadEvent:
    s: float
    kind: str  # "style" | "lanes" | "intersection"
    value: int = 0  # new lane count for "lanes"


@dataclass(frozen=True)
class RoadSpec:
    start: tuple[float, float]
    heading: float
    length: float
    lanes: int = 2
    divider: str = "dashed"
    curvature: tuple[tuple[float, float], ...] = ()  # (piece length, curvature) pairs
    events: tuple[RoadEvent, ...] = ()


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    extent_m: tuple[float, float] = (40.96, 40.96)
    road_count: int = 2
    lanes_per_road: tuple[int, int] = (1, 3)
    dash_period_m: float = 3.0
    intersection_probability: float = 0.0
    style_change_probability: float = 0.5
    lane_change_probability: float = 0.0
    wear_rate: float = 0.0
    occlusion_count: int = 0
    lane_width: float = 3.5
    n_points: int = 20
    tile_px: int = 256
    pixel_size: float = 0.04
    roads: tuple[RoadSpec, ...] | None = None

    def validate(self) -> None:
        w, h = self.extent_m
        if not (w > 0 and h > 0):
            raise SpecError("extent_m must be positive")
        for name in ("intersection_probability", "style_change_probability",
                     "lane_change_probability", "wear_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SpecError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.lanes_per_road
        if not 1 <= lo <= hi:
            raise SpecError("lanes_per_road must satisfy 1 <= min <= max")
        if self.road_count < 0 or self.occlusion_count < 0:
            raise SpecError("counts must be non-negative")
        if self.n_points < 2 or self.tile_px <= 0 or self.pixel_size <= 0:
            raise SpecError("n_points >= 2, tile_px > 0 and pixel_size > 0 required")
        if self.dash_period_m <= 0 or self.lane_width <= 0:
            raise SpecError("dash_period_m and lane_width must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        roads = d.pop("roads", None)
        if roads is not None:
            roads = tuple(
                RoadSpec(start=tuple(r["start"]), heading=r["heading"], length=r["length"],
                         lanes=r.get("lanes", 2), divider=r.get("divider", "dashed"),
                         curvature=tuple(tuple(c) for c in r.get("curvature", ())),
                         events=tuple(RoadEvent(**e) for e in r.get("events", ())))
                for r in roads)
        for key in ("extent_m", "lanes_per_road"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(roads=roads, **d)
        except TypeError as exc:
            raise SpecError(str(exc)) from None


def rng_for(seed: int, *key) -> np.random.Generator:
    """Counter-style generator keyed by (seed, key...)."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in key:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return np.random.default_rng(words)


# ---------------------------------------------------------------- centerlines

def centerline(road: RoadSpec, s) -> tuple[np.ndarray, np.ndarray]:
    """Positions and headings at arc lengths ``s`` along a piecewise-circular road."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    pieces = list(road.curvature)
    used = sum(length for length, _ in pieces)
    if used < road.length:
        pieces.append((road.length - used + 1e-9, 0.0))
    pos = np.empty((len(s), 2))
    head = np.empty(len(s))
    x, y, th, s0 = road.start[0], road.start[1], road.heading, 0.0
    done = np.zeros(len(s), dtype=bool)
    for i, (length, k) in enumerate(pieces):
        last = i == len(pieces) - 1
        sel = ~done & ((s <= s0 + length) | last)
        t = s[sel] - s0
        if k == 0.0:
            pos[sel, 0] = x + t * math.cos(th)
            pos[sel, 1] = y + t * math.sin(th)
        else:
            pos[sel, 0] = x + (np.sin(th + k * t) - math.sin(th)) / k
            pos[sel, 1] = y - (np.cos(th + k * t) - math.cos(th)) / k
        head[sel] = th + k * t
        done |= sel
        if k == 0.0:
            x, y = x + length * math.cos(th), y + length * math.sin(th)
        else:
            x, y = (x + (math.sin(th + k * length) - math.sin(th)) / k,
                    y - (math.cos(th + k * length) - math.cos(th)) / k)
        th += k * length
        s0 += length
    return pos, head


def offset_curve(road: RoadSpec, s0: float, s1: float, offset: float, step: float = 0.25) -> np.ndarray:
    n = max(2, int(math.ceil((s1 - s0) / step)) + 1)
    s = np.linspace(s0, s1, n)
    pos, head = centerline(road, s)
    normal = np.stack([-np.sin(head), np.cos(head)], axis=1)
    return pos + offset * normal


# ---------------------------------------------------------------- world

def _random_roads(spec: WorldSpec, rng: np.random.Generator) -> list[RoadSpec]:
    w, h = spec.extent_m
    roads = []
    band = h / max(spec.road_count, 1)
    for i in range(spec.road_count):
        lanes = int(rng.integers(spec.lanes_per_road[0], spec.lanes_per_road[1] + 1))
        y0 = band * (i + 0.5)
        half = 0.5 * lanes * spec.lane_width
        scale = 1.0
        heading = float(rng.uniform(-0.03, 0.03))
        pieces = []
        s = 0.0
        while s < w:
            length = float(rng.uniform(10.0, 30.0))
            pieces.append((length, float(rng.uniform(-1.0, 1.0)) / 200.0))
            s += length
        divider = "dashed" if rng.random() < 0.5 else "solid"
        events = []
        if rng.random() < spec.style_change_probability:
            events.append(RoadEvent(float(rng.uniform(0.2, 0.8)) * w, "style"))
        if rng.random() < spec.lane_change_probability:
            new = lanes + (1 if lanes < spec.lanes_per_road[1] else -1)
            if spec.lanes_per_road[0] <= new <= spec.lanes_per_road[1] and new != lanes:
                events.append(RoadEvent(float(rng.uniform(0.2, 0.8)) * w, "lanes", new))
        if rng.random() < spec.intersection_probability:
            events.append(RoadEvent(float(rng.uniform(0.3, 0.7)) * w, "intersection"))
        # keep the road inside its horizontal band
        for _ in range(8):
            road = RoadSpec((0.0, y0), heading * scale, w, lanes, divider,
                            tuple((l, k * scale) for l, k in pieces), tuple(events))
            ys = centerline(road, np.linspace(0, w, 64))[0][:, 1]
            if ys.min() - half > band * i and ys.max() + half < band * (i + 1):
                break
            scale *= 0.5
        roads.append(road)
    return roads


def banded_roads(seed: int, rows: int, tile_m: float, width_m: float, lanes: int = 2,
                 lane_width: float = 3.5, style_change: bool = False,
                 divider: str | None = None) -> tuple[RoadSpec, ...]:
    """One gently curving road per tile row, kept inside its row.

    Every cross-tile connection is then between horizontally adjacent tiles,
    which are consecutive in serpentine scan order.
    """
    rng = rng_for(seed, "bands")
    half = 0.5 * lanes * lane_width
    slack = 0.5 * tile_m - half - 0.25
    if slack <= 0:
        raise SpecError("tile rows are too narrow for the requested lanes")
    roads = []
    for i in range(rows):
        y0 = (i + 0.5) * tile_m + float(rng.uniform(-0.3, 0.3)) * slack
        heading = float(rng.uniform(-0.01, 0.01))
        pieces, s = [], 0.0
        while s < width_m:
            length = float(rng.uniform(8.0, 16.0))
            pieces.append((length, float(rng.uniform(-1.0, 1.0)) / 300.0))
            s += length
        div = divider or ("dashed" if rng.random() < 0.5 else "solid")
        events = ()
        if style_change:
            events = (RoadEvent(float(rng.uniform(0.3, 0.7)) * width_m, "style"),)
        scale = 1.0
        for _ in range(12):
            road = RoadSpec((0.0, y0), heading * scale, width_m, lanes, div,
                            tuple((l, k * scale) for l, k in pieces), events)
            ys = centerline(road, np.linspace(0, width_m, 64))[0][:, 1]
            if ys.min() - half > i * tile_m + 0.25 and ys.max() + half < (i + 1) * tile_m - 0.25:
                break
            scale *= 0.5
        else:
            road = RoadSpec((0.0, (i + 0.5) * tile_m), 0.0, width_m, lanes, div, (), events)
        roads.append(road)
    return tuple(roads)


def banded_spec(seed: int, grid: tuple[int, int] = (4, 4), tile_px: int = 64,
                pixel_size: float = 0.16, lanes: int = 2, style_change: bool = False,
                divider: str | None = None, **overrides) -> WorldSpec:
    """WorldSpec over a ``grid`` of tiles with :func:`banded_roads`."""
    rows, cols = grid
    tile_m = tile_px * pixel_size
    extent = (cols * tile_m, rows * tile_m)
    lane_width = overrides.get("lane_width", 3.5)
    roads = banded_roads(seed, rows, tile_m, extent[0], lanes, lane_width, style_change, divider)
    base = dict(seed=seed, extent_m=extent, road_count=rows, lanes_per_road=(lanes, lanes),
                tile_px=tile_px, pixel_size=pixel_size, n_points=10, roads=roads)
    base.update(overrides)
    return WorldSpec(**base)


def _sections(road: RoadSpec) -> list[dict]:
    """Split a road into constant-layout sections and intersection gaps."""
    events = sorted(road.events, key=lambda e: e.s)
    lanes, divider = road.lanes, road.divider
    out = []
    s0 = 0.0
    for ev in events:
        if not 0.0 < ev.s < road.length:
            continue
        if ev.kind == "intersection":
            out.append(dict(s0=s0, s1=ev.s - 4.0, lanes=lanes, divider=divider))
            out.append(dict(kind="intersection", s=ev.s, lanes=lanes))
            s0 = ev.s + 4.0
            continue
        out.append(dict(s0=s0, s1=ev.s, lanes=lanes, divider=divider))
        if ev.kind == "style":
            divider = "solid" if divider == "dashed" else "dashed"
        elif ev.kind == "lanes":
            lanes = ev.value
        else:
            raise SpecError(f"unknown road event kind {ev.kind!r}")
        s0 = ev.s
    out.append(dict(s0=s0, s1=road.length, lanes=lanes, divider=divider))
    return [sec for sec in out if sec.get("kind") == "intersection" or sec["s1"] - sec["s0"] > 1e-6]


def generate_world(spec: WorldSpec) -> VectorMap:
    """Ground-truth world map (meters). Deterministic in ``spec.seed``."""
    spec.validate()
    rng = rng_for(spec.seed, "world")
    roads = list(spec.roads) if spec.roads is not None else _random_roads(spec, rng)
    groups = []
    n = spec.n_points
    for ri, road in enumerate(roads):
        if road.length <= 0 or road.lanes < 1:
            raise SpecError(f"road {ri}: length and lanes must be positive")
        right = -0.5 * road.lanes * spec.lane_width
        for si, sec in enumerate(_sections(road)):
            gid = f"r{ri}.s{si}"
            if sec.get("kind") == "intersection":
                groups.append(_intersection_group(road, sec, right, spec, gid))
                continue
            elems = []
            for k in range(sec["lanes"] + 1):
                off = right + k * spec.lane_width
                pts = geom.resample_polyline(offset_curve(road, sec["s0"], sec["s1"], off), n)
                outer = k in (0, sec["lanes"])
                cls = LANE_SOLID if outer or sec["divider"] == "solid" else LANE_DASHED
                elems.append(ElementInstance(pts, cls, 1.0, f"{gid}.l{k}"))
            poly = geom.min_bounding_rect([e.points for e in elems])
            groups.append(LaneGroup(gid, tuple(elems), poly))
    return VectorMap(tuple(groups), (), spec.pixel_size, n)


def _intersection_group(road, sec, right, spec, gid) -> LaneGroup:
    s, n = sec["s"], spec.n_points
    left = right + sec["lanes"] * spec.lane_width
    pos, head = centerline(road, [s - 4.0])
    normal = np.array([-math.sin(head[0]), math.cos(head[0])])
    stop = np.stack([pos[0] + right * normal, pos[0] + left * normal])
    elems = [ElementInstance(geom.resample_polyline(stop, n), STOP_LINE, 1.0, f"{gid}.stop")]
    for j, (a, b) in enumerate(((s - 3.5, s - 0.5), (s + 0.5, s + 3.5))):
        p, hd = centerline(road, [a, b])
        nrm = np.stack([-np.sin(hd), np.cos(hd)], axis=1)
        ring = np.array([p[0] + right * nrm[0], p[1] + right * nrm[1],
                         p[1] + left * nrm[1], p[0] + left * nrm[0]])
        elems.append(ElementInstance(geom.resample_ring(geom.as_polygon(ring), n), CROSSWALK,
                                     1.0, f"{gid}.cw{j}"))
    poly = geom.min_bounding_rect([e.points for e in elems])
    return LaneGroup(gid, tuple(elems), poly)


# ---------------------------------------------------------------- tiles

def tile_grid(extent_m: tuple[float, float], tile_px: int = 256, pixel_size: float = 0.04,
              origin: tuple[float, float] = (0.0, 0.0)) -> list[TileFrame]:
    """Serpentine (zig-zag) tile order: even rows left to right, odd rows right to left."""
    size = tile_px * pixel_size
    cols = max(1, int(math.ceil(extent_m[0] / size - 1e-9)))
    rows = max(1, int(math.ceil(extent_m[1] / size - 1e-9)))
    frames = []
    for r in range(rows):
        cs = range(cols) if r % 2 == 0 else range(cols - 1, -1, -1)
        for c in cs:
            frames.append(TileFrame((origin[0] + c * size, origin[1] + r * size), pixel_size,
                                    tile_px, tile_px, (r, c), len(frames)))
    return frames


def scanned_neighbors(frames: Sequence[TileFrame], index: tuple[int, int]) -> list[TileFrame]:
    """8-adjacent tiles visited before ``index``, in scan order."""
    by_index = {f.tile_index: f for f in frames}
    me = by_index[tuple(index)]
    out = [f for f in frames
           if f.scan_order < me.scan_order
           and max(abs(f.tile_index[0] - me.tile_index[0]),
                   abs(f.tile_index[1] - me.tile_index[1])) == 1]
    return sorted(out, key=lambda f: f.scan_order)


def _pixel_centers(frame: TileFrame) -> np.ndarray:
    ys, xs = np.mgrid[0:frame.height_px, 0:frame.width_px]
    return np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)


def _stroke_field(points_px: np.ndarray, centers: np.ndarray, margin: float):
    """Distance and along-track position (pixel units) of pixel centers near a polyline."""
    lo, hi = points_px.min(axis=0) - margin, points_px.max(axis=0) + margin
    near = np.flatnonzero(np.all((centers >= lo) & (centers <= hi), axis=1))
    if len(near) == 0:
        return near, np.zeros(0), np.zeros(0)
    a, b = points_px[:-1], points_px[1:]
    p = centers[near][:, None, :]
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
    t = np.clip(np.sum((p - a) * ab, axis=2) / denom, 0.0, 1.0)
    d = np.hypot(*(p - (a + t[..., None] * ab)).transpose(2, 0, 1))
    k = np.argmin(d, axis=1)
    rows = np.arange(len(near))
    cum = geom.cumulative_length(points_px)
    along = cum[k] + t[rows, k] * np.sqrt(denom[k])
    return near, d[rows, k], along


def _dash_on(along_m: np.ndarray, period: float) -> np.ndarray:
    return np.mod(along_m, period) < 0.5 * period


def _in_tile(points_w: np.ndarray, frame: TileFrame, margin_m: float) -> bool:
    x0, y0, x1, y1 = frame.bounds
    lo, hi = points_w.min(axis=0), points_w.max(axis=0)
    return not (hi[0] < x0 - margin_m or lo[0] > x1 + margin_m
                or hi[1] < y0 - margin_m or lo[1] > y1 + margin_m)


def rasterize_mask(world: VectorMap, frame: TileFrame, spec: WorldSpec) -> np.ndarray:
    """Foreground mask: open elements at 2 px stroke width, dashes respected."""
    mask = np.zeros(frame.height_px * frame.width_px, dtype=bool)
    centers = _pixel_centers(frame)
    for e in world.elements():
        if e.closed or not _in_tile(e.points, frame, 1.0):
            continue
        pts = frame.world_to_pixel(e.points)
        near, dist, along = _stroke_field(pts, centers, STROKE_HALF_WIDTH_PX + 1)
        on = dist <= STROKE_HALF_WIDTH_PX
        if e.cls == LANE_DASHED:
            on &= _dash_on(along * frame.pixel_size, spec.dash_period_m)
        mask[near[on]] = True
    return mask.reshape(frame.height_px, frame.width_px)


def render_tile(world: VectorMap, frame: TileFrame, spec: WorldSpec) -> np.ndarray:
    """Gray BEV-style raster in [0, 1]; deterministic in (seed, tile index)."""
    h, w = frame.height_px, frame.width_px
    centers = _pixel_centers(frame)
    img = np.full(h * w, BACKGROUND)
    centers_w = frame.pixel_to_world(centers)
    for g in world.groups:
        if _in_tile(g.polygon, frame, 0.0):
            inside, _ = geom.points_to_polygon(centers_w, g.polygon)
            img[inside] = ROAD

    for e in world.elements():
        if not _in_tile(e.points, frame, 1.0):
            continue
        if e.cls == CROSSWALK:
            ring = e.points
            inside, _ = geom.points_to_polygon(centers_w, ring)
            u = geom.edge_unit_vectors(ring[:2])[0]
            v = centers_w[inside] @ np.array([-u[1], u[0]])
            stripes = np.floor((v - v.min(initial=0.0)) / 0.5) % 2 == 0
            idx = np.flatnonzero(inside)[stripes]
            img[idx] = MARKING
            continue
        if e.closed:
            continue
        pts = frame.world_to_pixel(e.points)
        near, dist, along = _stroke_field(pts, centers, STROKE_HALF_WIDTH_PX + 1)
        # solid core over the mask support, faint anti-aliased fringe outside it
        fringe = 0.35 * np.clip((STROKE_HALF_WIDTH_PX + 0.3 - dist) / 0.3, 0.0, 1.0)
        alpha = np.where(dist <= STROKE_HALF_WIDTH_PX, 1.0, fringe)
        along_m = along * frame.pixel_size
        if e.cls == LANE_DASHED:
            alpha = alpha * _dash_on(along_m, spec.dash_period_m)
        if spec.wear_rate > 0:
            chunks = np.floor(along_m).astype(int)
            u = rng_for(spec.seed, "wear", e.instance_id).random(int(chunks.max(initial=0)) + 1)
            alpha = alpha * (u[chunks] >= spec.wear_rate)
        img[near] = img[near] * (1 - alpha) + MARKING * alpha

    img = img.reshape(h, w)
    rng = rng_for(spec.seed, "tile", *frame.tile_index)
    if spec.occlusion_count:
        ys, xs = np.mgrid[0:h, 0:w] + 0.5
        for _ in range(spec.occlusion_count):
            cx, cy = rng.uniform(0, w), rng.uniform(0, h)
            ax, ay = rng.uniform(0.5, 2.0, size=2) / frame.pixel_size
            th = rng.uniform(0, math.pi)
            dx, dy = xs - cx, ys - cy
            u = (dx * math.cos(th) + dy * math.sin(th)) / ax
            v = (-dx * math.sin(th) + dy * math.cos(th)) / ay
            img[u * u + v * v <= 1.0] = OCCLUSION
    img = img + rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------- samples

def clip_world_to_tile(world: VectorMap, frame: TileFrame) -> list[LaneGroup]:
    """Ground-truth groups of one tile, in world coordinates.

    Open elements are cut at the tile border into pieces; pieces shorter than
    1 m are dropped. Piece ids are ``<element>@<row>_<col>#<k>``.
    """
    x0, y0, x1, y1 = frame.bounds
    # keep far-border points strictly inside the half-open pixel range
    shrink = 1e-6 * frame.pixel_size
    box = (x0, y0, x1 - shrink, y1 - shrink)
    tag = f"{frame.tile_index[0]}_{frame.tile_index[1]}"
    n = world.n_points
    out = []
    for g in world.groups:
        if not _in_tile(g.polygon, frame, 0.0):
            continue
        members = []
        for e in g.elements:
            if e.closed:
                ring = geom.clip_polygon_to_rect(e.points, *box)
                if len(ring) < 3 or abs(geom.signed_area(ring)) < 0.25:
                    continue
                pts = geom.resample_ring(geom.as_polygon(ring), n)
                members.append(ElementInstance(pts, e.cls, 1.0, f"{e.instance_id}@{tag}#0"))
                continue
            pieces = geom.clip_polyline_to_rect(e.points, *box)
            for k, piece in enumerate(pieces):
                if geom.polyline_length(piece) < MIN_PIECE_M:
                    continue
                members.append(ElementInstance(geom.resample_polyline(piece, n), e.cls, 1.0,
                                               f"{e.instance_id}@{tag}#{k}"))
        if members:
            poly = geom.min_bounding_rect([m.points for m in members])
            out.append(LaneGroup(f"{g.group_id}@{tag}", tuple(members), poly))
    return out


def world_element_id(piece_id: str) -> str:
    return piece_id.split("@", 1)[0]


def connected(a: ElementInstance, b: ElementInstance) -> bool:
    """Pieces of the same world element that touch end to start (world frame)."""
    if a.closed or b.closed or world_element_id(a.instance_id) != world_element_id(b.instance_id):
        return False
    if a.instance_id == b.instance_id:
        return False
    ends = [np.hypot(*(p - q)) for p in (a.points[0], a.points[-1]) for q in (b.points[0], b.points[-1])]
    return min(ends) < LINK_TOL_M


def topology_between(rows: Sequence[ElementInstance], cols: Sequence[ElementInstance]) -> np.ndarray:
    return np.array([[1.0 if connected(r, c) else 0.0 for c in cols] for r in rows]).reshape(len(rows), len(cols))


@dataclass(eq=False)
class TrainingSample:
    frame: TileFrame
    image: np.ndarray
    gt_groups: list[LaneGroup]          # pixel frame
    fg_mask: np.ndarray
    neighbor_prompts: list[tuple[tuple[int, int], list[ElementInstance]]]  # current pixel frame
    gt_topology: TopologyMatrix

    @property
    def gt_elements(self) -> list[ElementInstance]:
        return [e for g in self.gt_groups for e in g.elements]


def _to_pixel_groups(groups, frame):
    fn = frame.world_to_pixel
    return [LaneGroup(g.group_id, tuple(transform_element(e, fn) for e in g.elements),
                      fn(g.polygon), g.score) for g in groups]


def make_sample(world: VectorMap, frame: TileFrame, spec: WorldSpec,
                frames: Sequence[TileFrame], cache: dict | None = None) -> TrainingSample:
    cache = {} if cache is None else cache

    def gt_world(f):
        if f.tile_index not in cache:
            cache[f.tile_index] = clip_world_to_tile(world, f)
        return cache[f.tile_index]

    groups_w = gt_world(frame)
    cols = [e for g in groups_w for e in g.elements]
    prompts, rows = [], []
    for nb in scanned_neighbors(frames, frame.tile_index):
        elems = [e for g in gt_world(nb) for e in g.elements]
        rows.extend(elems)
        prompts.append((nb.tile_index, [transform_element(e, frame.world_to_pixel) for e in elems]))
    topo = TopologyMatrix(topology_between(rows, cols), [e.instance_id for e in rows],
                          [e.instance_id for e in cols])
    return TrainingSample(frame, render_tile(world, frame, spec), _to_pixel_groups(groups_w, frame),
                          rasterize_mask(world, frame, spec), prompts, topo)


@dataclass(eq=False)
class SynthDataset:
    spec: WorldSpec
    world: VectorMap
    frames: list[TileFrame]
    images: dict
    masks: dict
    gt_world: dict            # tile_index -> list[LaneGroup] (world frame)
    links: set = field(default_factory=set)

    def frame(self, index) -> TileFrame:
        return next(f for f in self.frames if f.tile_index == tuple(index))

    def gt_elements_world(self, index) -> list[ElementInstance]:
        return [e for g in self.gt_world[tuple(index)] for e in g.elements]

    def gt_groups_pixel(self, index) -> list[LaneGroup]:
        return _to_pixel_groups(self.gt_world[tuple(index)], self.frame(index))

    def sample(self, index) -> TrainingSample:
        f = self.frame(index)
        cols = self.gt_elements_world(index)
        prompts, rows = [], []
        for nb in scanned_neighbors(self.frames, f.tile_index):
            elems = self.gt_elements_world(nb.tile_index)
            rows.extend(elems)
            prompts.append((nb.tile_index, [transform_element(e, f.world_to_pixel) for e in elems]))
        topo = TopologyMatrix(topology_between(rows, cols), [e.instance_id for e in rows],
                              [e.instance_id for e in cols])
        return TrainingSample(f, self.images[f.tile_index], self.gt_groups_pixel(index),
                              self.masks[f.tile_index], prompts, topo)

    def manifest(self) -> dict:
        return {
            "format_version": DATASET_VERSION,
            "spec": self.spec.to_dict(),
            "tiles": [dict(f.to_record(), image=f"tiles/{_tag(f)}.png",
                           mask=f"masks/{_tag(f)}.png", label=f"labels/{_tag(f)}.jsonl")
                      for f in self.frames],
            "links": sorted(sorted(pair) for pair in self.links),
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        for sub in ("tiles", "masks", "labels"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        (out / "world.jsonl").write_bytes(serialize_map(self.world))
        for f in self.frames:
            t = _tag(f)
            img = np.round(self.images[f.tile_index] * 255).astype(np.uint8)
            Image.fromarray(img, mode="L").save(out / "tiles" / f"{t}.png")
            Image.fromarray(self.masks[f.tile_index].astype(np.uint8) * 255, mode="L").save(
                out / "masks" / f"{t}.png")
            s = self.sample(f.tile_index)
            label = VectorMap(tuple(s.gt_groups), (f.tile_index,), f.pixel_size, self.world.n_points)
            extra = [dict(kind="tile", **f.to_record()), topology_record(s.gt_topology)]
            (out / "labels" / f"{t}.jsonl").write_bytes(serialize_map(label, extra))
        with open(out / "manifest.json", "w") as fh:
            json.dump(self.manifest(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def _tag(f: TileFrame) -> str:
    return f"r{f.tile_index[0]}_c{f.tile_index[1]}"


def build_dataset(spec: WorldSpec, world: VectorMap | None = None) -> SynthDataset:
    spec.validate()
    world = generate_world(spec) if world is None else world
    frames = tile_grid(spec.extent_m, spec.tile_px, spec.pixel_size)
    gt = {f.tile_index: clip_world_to_tile(world, f) for f in frames}
    images = {f.tile_index: render_tile(world, f, spec) for f in frames}
    masks = {f.tile_index: rasterize_mask(world, f, spec) for f in frames}
    ds = SynthDataset(spec, world, frames, images, masks, gt)
    for f in frames:
        for nb in scanned_neighbors(frames, f.tile_index):
            for a in ds.gt_elements_world(nb.tile_index):
                for b in ds.gt_elements_world(f.tile_index):
                    if connected(a, b):
                        ds.links.add(frozenset((a.instance_id, b.instance_id)))
    return ds


class DatasetError(ValueError):
    pass


def load_dataset(data_dir) -> SynthDataset:
    root = Path(data_dir)
    try:
        with open(root / "manifest.json") as fh:
            man = json.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"no manifest.json in {root}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest: {exc}") from None
    if man.get("format_version") != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {man.get('format_version')!r}")
    spec = WorldSpec.from_dict(man["spec"])
    world = parse_records((root / "world.jsonl").read_bytes())[0]
    frames, images, masks, gt = [], {}, {}, {}
    for rec in man["tiles"]:
        f = TileFrame.from_record(rec)
        frames.append(f)
        img_path = root / rec["image"]
        if not img_path.exists():
            raise DatasetError(f"missing tile image for tile {list(f.tile_index)}: {img_path}")
        images[f.tile_index] = np.asarray(Image.open(img_path), dtype=np.float32) / 255.0
        masks[f.tile_index] = np.asarray(Image.open(root / rec["mask"])) > 127
        label, _ = parse_records((root / rec["label"]).read_bytes())
        fn = f.pixel_to_world
        gt[f.tile_index] = [LaneGroup(g.group_id, tuple(transform_element(e, fn) for e in g.elements),
                                      fn(g.polygon), g.score) for g in label.groups]
    frames.sort(key=lambda f: f.scan_order)
    ds = SynthDataset(spec, world, frames, images, masks, gt)
    ds.links = {frozenset(pair) for pair in man.get("links", [])}
    return ds
