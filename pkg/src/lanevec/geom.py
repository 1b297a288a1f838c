"""Planar geometry primitives.

Polylines, polygons and segments are plain ``(n, 2)`` float arrays. Polygons
are implicitly closed (the last vertex connects back to the first) and are
normalized to counter-clockwise order by :func:`as_polygon`.
"""
from __future__ import annotations

import numpy as np
import shapely

BOUNDARY_TOL = 1e-9


class GeometryError(ValueError):
    pass


def as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GeometryError(f"expected an (n, 2) point array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError("non-finite coordinates")
    return arr


def signed_area(poly) -> float:
    p = np.asarray(poly, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def as_polygon(vertices) -> np.ndarray:
    """Validate a vertex ring and return it counter-clockwise."""
    p = as_points(vertices)
    if len(p) >= 2 and np.allclose(p[0], p[-1]):
        p = p[:-1]
    if len(p) < 3:
        raise GeometryError("polygon needs at least 3 vertices")
    area = signed_area(p)
    if area == 0.0:
        raise GeometryError("polygon has zero area")
    return p if area > 0 else p[::-1].copy()


def dedupe(points) -> np.ndarray:
    """Drop consecutive duplicate points."""
    p = as_points(points)
    if len(p) < 2:
        return p
    keep = np.ones(len(p), dtype=bool)
    keep[1:] = np.any(p[1:] != p[:-1], axis=1)
    return p[keep]


def cumulative_length(points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    seg = np.hypot(*np.diff(p, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(seg)])


def polyline_length(points) -> float:
    return float(cumulative_length(points)[-1])


def interpolate_at(points, s) -> np.ndarray:
    """Points at arc-length positions ``s`` (clamped to the polyline)."""
    p = dedupe(points)
    cum = cumulative_length(p)
    s = np.clip(np.asarray(s, dtype=float), 0.0, cum[-1])
    return np.stack([np.interp(s, cum, p[:, 0]), np.interp(s, cum, p[:, 1])], axis=-1)


def resample_polyline(points, n: int) -> np.ndarray:
    """Resample to ``n`` points at equal arc-length spacing.

    The first and last output points are exactly the input endpoints.
    """
    if n < 2:
        raise GeometryError("n must be >= 2")
    p = dedupe(points)
    if len(p) < 2:
        raise GeometryError("degenerate polyline (zero arc length)")
    cum = cumulative_length(p)
    total = cum[-1]
    s = np.linspace(0.0, total, n)
    out = np.stack([np.interp(s, cum, p[:, 0]), np.interp(s, cum, p[:, 1])], axis=-1)
    out[0], out[-1] = p[0], p[-1]
    return out


def resample_ring(vertices, n: int) -> np.ndarray:
    """Resample a closed ring to ``n`` points along its perimeter, starting at vertex 0.

    The closing point is not repeated.
    """
    ring = as_points(vertices)
    closed = np.vstack([ring, ring[:1]])
    pts = resample_polyline(closed, n + 1)
    return pts[:-1]


def edge_unit_vectors(points) -> np.ndarray:
    p = as_points(points)
    d = np.diff(p, axis=0)
    norm = np.hypot(d[:, 0], d[:, 1])
    if np.any(norm == 0):
        raise GeometryError("zero-length edge")
    return d / norm[:, None]


def convex_hull(points) -> np.ndarray:
    """Counter-clockwise convex hull (monotone chain), collinear points removed."""
    p = np.unique(as_points(points), axis=0)
    if len(p) < 3:
        return p

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for pt in p:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], pt) <= 0:
            lower.pop()
        lower.append(pt)
    upper: list = []
    for pt in p[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], pt) <= 0:
            upper.pop()
        upper.append(pt)
    return np.array(lower[:-1] + upper[:-1])


def _thin_rect(a, b, eps) -> np.ndarray:
    u = (b - a) / np.hypot(*(b - a))
    n = np.array([-u[1], u[0]])
    return np.array([a - eps * n, b - eps * n, b + eps * n, a + eps * n])


def min_bounding_rect(point_sets) -> np.ndarray:
    """Minimum-area oriented rectangle around the union of ``point_sets``.

    Rotating calipers over the convex hull. Returns 4 counter-clockwise
    vertices. Collinear input yields a rectangle of width ``2e-6 * length``.
    """
    sets = [as_points(s) for s in point_sets if len(s)]
    if not sets:
        raise GeometryError("empty input")
    hull = convex_hull(np.vstack(sets))
    if len(hull) == 1:
        raise GeometryError("all points coincide")
    if len(hull) == 2:
        a, b = hull
        return _thin_rect(a, b, 1e-6 * np.hypot(*(b - a)))

    h = len(hull)
    edges = np.roll(hull, -1, axis=0) - hull
    units = edges / np.hypot(edges[:, 0], edges[:, 1])[:, None]

    def proj(k, v):
        return float(np.dot(hull[k % h], v))

    # pointers to the extreme vertices along +u, +n and -u
    u0, n0 = units[0], np.array([-units[0][1], units[0][0]])
    j = int(np.argmax(hull @ u0))
    k = int(np.argmax(hull @ n0))
    m = int(np.argmin(hull @ u0))
    best = None
    for i in range(h):
        u = units[i]
        n = np.array([-u[1], u[0]])
        while proj(j + 1, u) > proj(j, u) + 1e-15:
            j += 1
        while proj(k + 1, n) > proj(k, n) + 1e-15:
            k += 1
        while proj(m + 1, u) < proj(m, u) - 1e-15:
            m += 1
        amax, amin = proj(j, u), proj(m, u)
        b0, bmax = float(np.dot(hull[i], n)), proj(k, n)
        area = (amax - amin) * (bmax - b0)
        if best is None or area < best[0]:
            best = (area, u, n, amin, amax, b0, bmax)

    _, u, n, amin, amax, b0, bmax = best
    return np.array([
        amin * u + b0 * n,
        amax * u + b0 * n,
        amax * u + bmax * n,
        amin * u + bmax * n,
    ])


def points_to_segments_distance(points, a, b) -> np.ndarray:
    """Distance matrix from points (M, 2) to segments a[K] -> b[K]; shape (M, K)."""
    p = np.asarray(points, dtype=float)[:, None, :]
    a = np.asarray(a, dtype=float)[None]
    b = np.asarray(b, dtype=float)[None]
    ab = b - a
    denom = np.sum(ab * ab, axis=-1)
    t = np.sum((p - a) * ab, axis=-1) / np.where(denom == 0, 1.0, denom)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.hypot(*(p - closest).transpose(2, 0, 1))


def points_to_polygon(points, poly) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`point_to_polygon`; returns (inside flags, edge distances)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    ring = np.asarray(poly, dtype=float)
    a, b = ring, np.roll(ring, -1, axis=0)
    dist = points_to_segments_distance(pts, a, b).min(axis=1)

    x, y = pts[:, 0:1], pts[:, 1:2]
    ax, ay, bx, by = a[:, 0], a[:, 1], b[:, 0], b[:, 1]
    straddle = (ay > y) != (by > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = ax + (y - ay) * (bx - ax) / (by - ay)
    crossings = np.sum(straddle & (x < x_cross), axis=1)
    inside = (crossings % 2 == 1) | (dist <= BOUNDARY_TOL)
    return inside, dist


def point_to_polygon(p, poly) -> tuple[bool, float]:
    """Crossing-number containment plus distance to the nearest edge.

    Points on the boundary count as inside and report distance 0.
    """
    inside, dist = points_to_polygon(np.asarray(p, dtype=float)[None], poly)
    d = float(dist[0])
    return bool(inside[0]), (0.0 if d <= BOUNDARY_TOL else d)


def point_to_polyline_distance(points, polyline) -> np.ndarray:
    pl = as_points(polyline)
    return points_to_segments_distance(np.atleast_2d(points), pl[:-1], pl[1:]).min(axis=1)


def segment_to_polyline_distance(segment, polyline) -> float:
    """Distance from the midpoint of ``segment`` to the nearest point on ``polyline``."""
    seg = as_points(segment)
    mid = 0.5 * (seg[0] + seg[1])
    return float(point_to_polyline_distance(mid[None], polyline)[0])


def polygon_iou(a, b) -> float:
    pa, pb = shapely.Polygon(as_points(a)), shapely.Polygon(as_points(b))
    union = pa.union(pb).area
    if union == 0:
        return 0.0
    return float(min(1.0, max(0.0, pa.intersection(pb).area / union)))


def split_by_length(points, step: float) -> list[tuple[np.ndarray, float]]:
    """Cut a polyline into consecutive chords of arc length ``step``.

    Returns (segment endpoints, weight) pairs; the weight is 1 except for a
    shorter trailing piece, which carries its length fraction.
    """
    p = dedupe(points)
    total = polyline_length(p)
    if total == 0:
        return []
    n_full = int(np.floor(total / step + 1e-9))
    cuts = list(np.arange(n_full + 1) * step)
    if total - cuts[-1] > 1e-9 * max(1.0, total):
        cuts.append(total)
    else:
        cuts[-1] = total
    knots = interpolate_at(p, np.array(cuts))
    out = []
    for i in range(len(cuts) - 1):
        w = min(1.0, (cuts[i + 1] - cuts[i]) / step)
        out.append((knots[i:i + 2], w))
    return out


def clip_polyline_to_rect(points, xmin, ymin, xmax, ymax) -> list[np.ndarray]:
    """Clip a polyline against an axis-aligned rectangle (Liang-Barsky per edge).

    Returns the inside pieces in traversal order; each keeps the input orientation.
    """
    p = dedupe(points)
    pieces: list[list[np.ndarray]] = []
    current: list[np.ndarray] | None = None
    for a, b in zip(p[:-1], p[1:]):
        d = b - a
        t0, t1 = 0.0, 1.0
        ok = True
        for q, r in ((-d[0], a[0] - xmin), (d[0], xmax - a[0]),
                     (-d[1], a[1] - ymin), (d[1], ymax - a[1])):
            if q == 0:
                if r < 0:
                    ok = False
                    break
                continue
            t = r / q
            if q < 0:
                t0 = max(t0, t)
            else:
                t1 = min(t1, t)
        if not ok or t0 > t1:
            current = None
            continue
        start, end = a + t0 * d, a + t1 * d
        if current is not None and t0 == 0.0:
            current.append(end)
        else:
            current = [start, end]
            pieces.append(current)
        if t1 < 1.0:
            current = None
    out = []
    for piece in pieces:
        arr = dedupe(np.array(piece))
        if len(arr) >= 2:
            out.append(arr)
    return out


def clip_polygon_to_rect(vertices, xmin, ymin, xmax, ymax) -> np.ndarray:
    """Sutherland-Hodgman clip of a ring against an axis-aligned rectangle."""
    ring = [np.asarray(v, dtype=float) for v in vertices]
    planes = (
        (lambda v: v[0] >= xmin, lambda a, b: _cut(a, b, 0, xmin)),
        (lambda v: v[0] <= xmax, lambda a, b: _cut(a, b, 0, xmax)),
        (lambda v: v[1] >= ymin, lambda a, b: _cut(a, b, 1, ymin)),
        (lambda v: v[1] <= ymax, lambda a, b: _cut(a, b, 1, ymax)),
    )
    for inside, cut in planes:
        if not ring:
            break
        out = []
        prev = ring[-1]
        for cur in ring:
            if inside(cur):
                if not inside(prev):
                    out.append(cut(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cut(prev, cur))
            prev = cur
        ring = out
    if len(ring) < 3:
        return np.zeros((0, 2))
    return dedupe(np.array(ring))


def _cut(a, b, axis, value):
    t = (value - a[axis]) / (b[axis] - a[axis])
    return a + t * (b - a)


def rotate(points, theta: float, center=(0.0, 0.0)) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    r = np.array([[c, -s], [s, c]])
    ctr = np.asarray(center, dtype=float)
    return (np.asarray(points, dtype=float) - ctr) @ r.T + ctr
