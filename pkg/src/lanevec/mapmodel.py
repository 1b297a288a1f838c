"""Vectorized lane-level map data model and the line-delimited JSON map format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import geom

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ElementClass:
    id: int
    name: str
    closed: bool


CLASSES: tuple[ElementClass, ...] = (
    ElementClass(0, "lane_solid", False),
    ElementClass(1, "lane_dashed", False),
    ElementClass(2, "stop_line", False),
    ElementClass(3, "crosswalk", True),
    ElementClass(4, "group_polygon", True),
)
N_CLS = len(CLASSES)
LANE_SOLID, LANE_DASHED, STOP_LINE, CROSSWALK, GROUP_POLYGON = range(N_CLS)
ELEMENT_CLASS_IDS = (LANE_SOLID, LANE_DASHED, STOP_LINE, CROSSWALK)


def is_closed(cls: int) -> bool:
    return CLASSES[cls].closed


class MapFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _arrays_equal(a, b) -> bool:
    return a.shape == b.shape and bool(np.array_equal(a, b))


@dataclass(frozen=True, eq=False)
class ElementInstance:
    points: np.ndarray
    cls: int
    score: float = 1.0
    instance_id: str = ""
    # ids of the instances merged into this one (empty when never merged)
    sources: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))

    @property
    def closed(self) -> bool:
        return is_closed(self.cls)

    @property
    def source_ids(self) -> tuple[str, ...]:
        return self.sources or (self.instance_id,)

    def __eq__(self, other):
        if not isinstance(other, ElementInstance):
            return NotImplemented
        return (self.cls == other.cls and self.score == other.score
                and self.instance_id == other.instance_id and self.sources == other.sources
                and _arrays_equal(self.points, other.points))


@dataclass(frozen=True, eq=False)
class LaneGroup:
    group_id: str
    elements: tuple[ElementInstance, ...]
    polygon: np.ndarray
    score: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        object.__setattr__(self, "polygon", np.asarray(self.polygon, dtype=float))

    def __eq__(self, other):
        if not isinstance(other, LaneGroup):
            return NotImplemented
        return (self.group_id == other.group_id and self.score == other.score
                and self.elements == other.elements
                and _arrays_equal(self.polygon, other.polygon))


@dataclass(frozen=True)
class TileFrame:
    """Georeference of one raster tile: ``world = origin + pixel_size * pixel``."""

    origin_world: tuple[float, float]
    pixel_size: float = 0.04
    width_px: int = 256
    height_px: int = 256
    tile_index: tuple[int, int] = (0, 0)
    scan_order: int = 0

    def __post_init__(self):
        if not self.pixel_size > 0:
            raise ValueError("pixel_size must be positive")

    @property
    def size_m(self) -> tuple[float, float]:
        return self.width_px * self.pixel_size, self.height_px * self.pixel_size

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin_world
        w, h = self.size_m
        return x0, y0, x0 + w, y0 + h

    def pixel_to_world(self, pts) -> np.ndarray:
        return np.asarray(self.origin_world) + self.pixel_size * np.asarray(pts, dtype=float)

    def world_to_pixel(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - np.asarray(self.origin_world)) / self.pixel_size

    def pixel_to_normalized(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=float) / np.array([self.width_px, self.height_px])

    def normalized_to_pixel(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=float) * np.array([self.width_px, self.height_px])

    def world_to_normalized(self, pts) -> np.ndarray:
        return self.pixel_to_normalized(self.world_to_pixel(pts))

    def normalized_to_world(self, pts) -> np.ndarray:
        return self.pixel_to_world(self.normalized_to_pixel(pts))

    def to_record(self) -> dict:
        return {"origin_world": list(self.origin_world), "pixel_size": self.pixel_size,
                "width_px": self.width_px, "height_px": self.height_px,
                "tile_index": list(self.tile_index), "scan_order": self.scan_order}

    @classmethod
    def from_record(cls, rec: dict) -> "TileFrame":
        return cls(origin_world=tuple(rec["origin_world"]), pixel_size=rec["pixel_size"],
                   width_px=rec["width_px"], height_px=rec["height_px"],
                   tile_index=tuple(rec["tile_index"]), scan_order=rec["scan_order"])


def pixel_to_world(p, frame: TileFrame) -> np.ndarray:
    return frame.pixel_to_world(p)


def world_to_pixel(p, frame: TileFrame) -> np.ndarray:
    return frame.world_to_pixel(p)


@dataclass(frozen=True, eq=False)
class TopologyMatrix:
    values: np.ndarray
    row_ids: tuple[str, ...]
    col_ids: tuple[str, ...]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).reshape(len(self.row_ids), len(self.col_ids))
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "row_ids", tuple(self.row_ids))
        object.__setattr__(self, "col_ids", tuple(self.col_ids))

    @classmethod
    def empty(cls, col_ids: Sequence[str] = ()) -> "TopologyMatrix":
        return cls(np.zeros((0, len(col_ids))), (), tuple(col_ids))

    def __eq__(self, other):
        if not isinstance(other, TopologyMatrix):
            return NotImplemented
        return (self.row_ids == other.row_ids and self.col_ids == other.col_ids
                and _arrays_equal(self.values, other.values))


@dataclass(frozen=True, eq=False)
class VectorTilePrediction:
    tile: TileFrame
    elements: tuple[ElementInstance, ...]
    group_polygons: tuple[tuple[np.ndarray, float], ...]
    fg_mask: np.ndarray
    topology: TopologyMatrix
    groups: tuple[LaneGroup, ...] = ()


@dataclass(frozen=True, eq=False)
class VectorMap:
    groups: tuple[LaneGroup, ...] = ()
    provenance: tuple[tuple[int, int], ...] = ()
    pixel_size: float = 0.04
    n_points: int = 20

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "provenance", tuple(tuple(p) for p in self.provenance))

    def elements(self) -> list[ElementInstance]:
        return [e for g in self.groups for e in g.elements]

    def __eq__(self, other):
        if not isinstance(other, VectorMap):
            return NotImplemented
        return (self.groups == other.groups and self.provenance == other.provenance
                and self.pixel_size == other.pixel_size and self.n_points == other.n_points)


def transform_element(e: ElementInstance, fn) -> ElementInstance:
    return replace(e, points=fn(e.points))


def transform_map(m: VectorMap, fn) -> VectorMap:
    groups = [replace(g, elements=tuple(transform_element(e, fn) for e in g.elements),
                      polygon=fn(g.polygon)) for g in m.groups]
    return replace(m, groups=tuple(groups))


# ---------------------------------------------------------------- file format

def _points_json(a: np.ndarray) -> list:
    return [[float(x), float(y)] for x, y in a]


def element_record(e: ElementInstance, group_id: str) -> dict:
    rec = {"kind": "element", "group_id": group_id, "instance_id": e.instance_id,
           "cls": int(e.cls), "score": float(e.score), "points": _points_json(e.points)}
    if e.sources:
        rec["merged_from"] = list(e.sources)
    return rec


def map_records(m: VectorMap) -> list[dict]:
    recs: list[dict] = [{"kind": "header", "format_version": FORMAT_VERSION,
                         "pixel_size": m.pixel_size, "n_points": m.n_points}]
    if m.provenance:
        recs.append({"kind": "provenance", "tiles": [list(t) for t in m.provenance]})
    for g in m.groups:
        recs.append({"kind": "group", "group_id": g.group_id, "score": float(g.score),
                     "polygon": _points_json(g.polygon)})
        recs.extend(element_record(e, g.group_id) for e in g.elements)
    return recs


def serialize_map(m: VectorMap, extra_records: Iterable[dict] = ()) -> bytes:
    """Line-delimited JSON: a header record, then group and element records.

    Floats are written with ``repr`` precision so parsing is exact.
    """
    lines = [json.dumps(r, separators=(",", ":")) for r in map_records(m)]
    lines += [json.dumps(r, separators=(",", ":")) for r in extra_records]
    return ("\n".join(lines) + "\n").encode("utf-8")


def topology_record(t: TopologyMatrix) -> dict:
    return {"kind": "topology", "row_ids": list(t.row_ids), "col_ids": list(t.col_ids),
            "values": [[float(v) for v in row] for row in t.values]}


def _points_from(value, line) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise MapFormatError("malformed point list", line) from None
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) == 0:
        raise MapFormatError("point list must be a non-empty list of [x, y]", line)
    return arr


def parse_records(data: bytes | str) -> tuple[VectorMap, dict]:
    """Parse a map file; returns the map plus any extra records keyed by kind."""
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    header = None
    provenance: list = []
    groups: dict[str, dict] = {}
    order: list[str] = []
    extras: dict[str, list] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise MapFormatError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(rec, dict) or "kind" not in rec:
            raise MapFormatError("record without 'kind'", lineno)
        kind = rec["kind"]
        try:
            if header is None:
                if kind != "header":
                    raise MapFormatError("first record must be the header", lineno)
                if rec.get("format_version") != FORMAT_VERSION:
                    raise MapFormatError(
                        f"unsupported format_version {rec.get('format_version')!r}", lineno)
                header = rec
            elif kind == "provenance":
                provenance = [tuple(int(v) for v in t) for t in rec["tiles"]]
            elif kind == "group":
                gid = str(rec["group_id"])
                if gid in groups:
                    raise MapFormatError(f"duplicate group {gid!r}", lineno)
                groups[gid] = {"polygon": _points_from(rec["polygon"], lineno),
                               "score": float(rec.get("score", 1.0)), "elements": []}
                order.append(gid)
            elif kind == "element":
                gid = str(rec["group_id"])
                if gid not in groups:
                    raise MapFormatError(f"element references unknown group {gid!r}", lineno)
                cls = rec["cls"]
                if not isinstance(cls, int) or isinstance(cls, bool):
                    raise MapFormatError("cls must be an integer", lineno)
                groups[gid]["elements"].append(ElementInstance(
                    points=_points_from(rec["points"], lineno), cls=cls,
                    score=float(rec["score"]), instance_id=str(rec["instance_id"]),
                    sources=tuple(str(s) for s in rec.get("merged_from", ()))))
            elif kind in ("header",):
                raise MapFormatError("duplicate header", lineno)
            else:
                extras.setdefault(kind, []).append(rec)
        except KeyError as exc:
            raise MapFormatError(f"missing field {exc.args[0]!r}", lineno) from None
    if header is None:
        raise MapFormatError("missing header", 1)
    m = VectorMap(
        groups=tuple(LaneGroup(gid, tuple(groups[gid]["elements"]), groups[gid]["polygon"],
                               groups[gid]["score"]) for gid in order),
        provenance=tuple(provenance),
        pixel_size=float(header["pixel_size"]),
        n_points=int(header["n_points"]),
    )
    return m, extras


def parse_map(data: bytes | str) -> VectorMap:
    return parse_records(data)[0]


def read_map(path) -> VectorMap:
    with open(path, "rb") as f:
        return parse_map(f.read())


def write_map(path, m: VectorMap, extra_records: Iterable[dict] = ()) -> None:
    with open(path, "wb") as f:
        f.write(serialize_map(m, extra_records))


# ---------------------------------------------------------------- grouping

def organize_groups(elements: Sequence[ElementInstance],
                    polygons: Sequence[tuple[np.ndarray, float]],
                    id_prefix: str = "g") -> list[LaneGroup]:
    """Assign each element to the polygon holding the most of its points.

    Ties go to the polygon whose centroid is closest on average. Elements
    with no point inside any polygon become singleton groups bounded by
    their own minimum rectangle.
    """
    polys = [np.asarray(p, dtype=float) for p, _ in polygons]
    members: list[list[ElementInstance]] = [[] for _ in polys]
    singles: list[ElementInstance] = []
    centroids = [p.mean(axis=0) for p in polys]
    for e in elements:
        if not polys:
            singles.append(e)
            continue
        counts = np.array([geom.points_to_polygon(e.points, p)[0].sum() for p in polys])
        best = counts.max()
        if best == 0:
            singles.append(e)
            continue
        tied = np.flatnonzero(counts == best)
        if len(tied) > 1:
            mean_d = [np.hypot(*(e.points - centroids[k]).T).mean() for k in tied]
            k = int(tied[int(np.argmin(mean_d))])
        else:
            k = int(tied[0])
        members[k].append(e)
    out = []
    for k, (poly, score) in enumerate(polygons):
        if members[k]:
            out.append(LaneGroup(f"{id_prefix}{k}", tuple(members[k]), poly, float(score)))
    for i, e in enumerate(singles):
        out.append(LaneGroup(f"{id_prefix}s{i}", (e,), geom.min_bounding_rect([e.points]),
                             float(e.score)))
    return out


# ---------------------------------------------------------------- merging

def join_polylines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Concatenate two polylines at their nearest endpoint pair.

    ``b`` (or ``a``) is flipped as needed so the result runs a -> b; a
    coincident junction point appears once.
    """
    ends = {
        ("end", "start"): np.hypot(*(a[-1] - b[0])),
        ("end", "end"): np.hypot(*(a[-1] - b[-1])),
        ("start", "start"): np.hypot(*(a[0] - b[0])),
        ("start", "end"): np.hypot(*(a[0] - b[-1])),
    }
    ea, eb = min(ends, key=ends.get)
    if ea == "start":
        a = a[::-1]
    if eb == "end":
        b = b[::-1]
    if np.allclose(a[-1], b[0], rtol=0, atol=1e-9):
        b = b[1:]
    return np.vstack([a, b])


def merge_instances(a: ElementInstance, b: ElementInstance, n_points: int | None = None) -> ElementInstance:
    if a.closed or b.closed:
        raise ValueError("only open-shape elements can be merged")
    if a.cls != b.cls:
        raise ValueError(f"class mismatch: {a.cls} vs {b.cls}")
    joined = join_polylines(a.points, b.points)
    n = n_points or len(a.points)
    return ElementInstance(
        points=geom.resample_polyline(joined, n), cls=a.cls,
        score=min(a.score, b.score), instance_id=a.instance_id,
        sources=a.source_ids + b.source_ids)
