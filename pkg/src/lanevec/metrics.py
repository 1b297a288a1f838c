"""Instance-level map quality: recall at fixed precision under distance/overlap criteria."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import geom
from .mapmodel import CLASSES, ElementInstance, VectorMap, is_closed, read_map

D_VALUES = (0.5, 1.0)
R_VALUES = (0.5, 0.8)
P_VALUES = (0.80, 0.90, 0.95)


@dataclass(frozen=True)
class MatchCriteria:
    d: float = 1.0
    r: float = 0.8
    endpoint_max: float = 3.0
    segment_step: float = 1.0
    iou_min: float = 0.5

    def __post_init__(self):
        if min(self.d, self.r, self.endpoint_max, self.segment_step, self.iou_min) <= 0:
            raise ValueError("criteria must be positive")


def endpoint_distances(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Start/end distances under the pairing (direct or swapped) with the smaller maximum."""
    direct = (np.hypot(*(pred[0] - gt[0])), np.hypot(*(pred[-1] - gt[-1])))
    swapped = (np.hypot(*(pred[0] - gt[-1])), np.hypot(*(pred[-1] - gt[0])))
    return min(direct, swapped, key=max)


def overlap_ratio(pred: np.ndarray, gt: np.ndarray, d: float, step: float = 1.0) -> float:
    """Length-weighted share of the prediction's ``step``-long segments within ``d`` of gt."""
    segs = geom.split_by_length(pred, step)
    if not segs:
        return 0.0
    mids = np.array([0.5 * (s[0] + s[1]) for s, _ in segs])
    w = np.array([w for _, w in segs])
    dist = geom.point_to_polyline_distance(mids, gt)
    return float(np.sum(w * (dist < d)) / np.sum(w))


def is_open_match(pred: ElementInstance, gt: ElementInstance, c: MatchCriteria) -> bool:
    if pred.closed or gt.closed:
        raise ValueError("is_open_match needs open-shape elements")
    if pred.cls != gt.cls:
        return False
    if max(endpoint_distances(pred.points, gt.points)) >= c.endpoint_max:
        return False
    return overlap_ratio(pred.points, gt.points, c.d, c.segment_step) > c.r


def is_closed_match(pred: ElementInstance, gt: ElementInstance, c: MatchCriteria) -> bool:
    if not (pred.closed and gt.closed):
        raise ValueError("is_closed_match needs closed-shape elements")
    if pred.cls != gt.cls:
        return False
    try:
        a, b = geom.as_polygon(pred.points), geom.as_polygon(gt.points)
    except geom.GeometryError:
        return False
    return geom.polygon_iou(a, b) > c.iou_min


def is_match(pred: ElementInstance, gt: ElementInstance, c: MatchCriteria) -> bool:
    if pred.cls != gt.cls:
        return False
    return is_closed_match(pred, gt, c) if is_closed(gt.cls) else is_open_match(pred, gt, c)


@dataclass
class TileMatch:
    scores: np.ndarray       # prediction scores, descending
    tp: np.ndarray           # bool per prediction in that order
    gt_of_pred: list         # matched gt index or None
    n_gt: int

    @property
    def counts(self) -> dict:
        tp = int(self.tp.sum())
        return {"tp": tp, "fp": int(len(self.tp) - tp), "fn": int(self.n_gt - tp)}


def match_tileset(preds: Sequence[ElementInstance], gts: Sequence[ElementInstance],
                  c: MatchCriteria) -> TileMatch:
    """Greedy one-to-one matching in descending score order.

    Each prediction claims the first still-unclaimed gt it matches.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    claimed = np.zeros(len(gts), dtype=bool)
    tp, owner = [], []
    for i in order:
        hit = None
        for j, g in enumerate(gts):
            if not claimed[j] and is_match(preds[i], g, c):
                hit = j
                break
        if hit is not None:
            claimed[hit] = True
        tp.append(hit is not None)
        owner.append(hit)
    scores = np.array([preds[i].score for i in order], dtype=float)
    return TileMatch(scores, np.array(tp, dtype=bool), owner, len(gts))


def pr_sweep(scores, tp, n_gt: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision and recall at every distinct score threshold (high to low)."""
    scores = np.asarray(scores, dtype=float)
    tp = np.asarray(tp, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], tp[order]
    ctp = np.cumsum(t)
    k = np.arange(1, len(s) + 1)
    last = np.r_[s[1:] != s[:-1], True] if len(s) else np.zeros(0, bool)
    thr = s[last]
    precision = ctp[last] / k[last]
    recall = ctp[last] / n_gt if n_gt else np.ones(last.sum())
    return thr, precision, recall


def recall_at_precision(scores, tp, n_gt: int, p_target: float) -> tuple[float, bool]:
    """Largest recall over operating points with precision >= ``p_target``.

    Returns (recall, reachable). With no gts the recall is 1 when there are
    no predictions either, else 0.
    """
    if not 0 < p_target <= 1:
        raise ValueError("p_target must lie in (0, 1]")
    if n_gt == 0:
        return (1.0, True) if len(scores) == 0 else (0.0, False)
    _, prec, rec = pr_sweep(scores, tp, n_gt)
    ok = prec >= p_target - 1e-12
    if not ok.any():
        return 0.0, False
    return float(rec[ok].max()), True


@dataclass
class EvalReport:
    cells: list = field(default_factory=list)

    def cell(self, d: float, r: float, p: float, cls: str = "all") -> dict:
        for c in self.cells:
            if c["d"] == d and c["r"] == r and c["p"] == p and c["class"] == cls:
                return c
        raise KeyError((d, r, p, cls))

    def recall(self, d: float, r: float, p: float, cls: str = "all") -> float:
        return self.cell(d, r, p, cls)["recall"]

    def to_records(self) -> str:
        return "".join(json.dumps(c, sort_keys=True) + "\n" for c in self.cells)

    def to_table(self) -> str:
        classes = list(dict.fromkeys(c["class"] for c in self.cells))
        ps = sorted({c["p"] for c in self.cells})
        lines = []
        for cls in classes:
            lines.append(f"[{cls}]")
            lines.append("d     r     " + "  ".join(f"R@P={p:.2f}" for p in ps) + "    TP   FP   FN")
            keys = sorted({(c["d"], c["r"]) for c in self.cells if c["class"] == cls})
            for d, r in keys:
                row = [self.cell(d, r, p, cls) for p in ps]
                vals = "  ".join(f"{c['recall']:8.4f}" for c in row)
                lines.append(f"{d:<5} {r:<5} {vals}  {row[0]['tp']:4d} {row[0]['fp']:4d} {row[0]['fn']:4d}")
            lines.append("")
        return "\n".join(lines)


def _pooled(tiles, c: MatchCriteria, cls_id: int | None):
    scores, tp, n_gt = [], [], 0
    counts = {"tp": 0, "fp": 0, "fn": 0}
    for preds, gts in tiles:
        if cls_id is not None:
            preds = [e for e in preds if e.cls == cls_id]
            gts = [e for e in gts if e.cls == cls_id]
        m = match_tileset(preds, gts, c)
        scores.append(m.scores)
        tp.append(m.tp)
        n_gt += m.n_gt
        for k, v in m.counts.items():
            counts[k] += v
    scores = np.concatenate(scores) if scores else np.zeros(0)
    tp = np.concatenate(tp) if tp else np.zeros(0, bool)
    return scores, tp, n_gt, counts


def evaluate_tiles(tiles: Iterable[tuple[Sequence[ElementInstance], Sequence[ElementInstance]]],
                   d_values=D_VALUES, r_values=R_VALUES, p_values=P_VALUES,
                   per_class: bool = True) -> EvalReport:
    """Pool greedy matches over tiles and compute R@P for every criteria cell."""
    tiles = [(list(p), list(g)) for p, g in tiles]
    present = sorted({e.cls for _, g in tiles for e in g} | {e.cls for p, _ in tiles for e in p})
    groups: list[tuple[str, int | None]] = [("all", None)]
    if per_class:
        groups += [(CLASSES[k].name if 0 <= k < len(CLASSES) else str(k), k) for k in present]
    report = EvalReport()
    for d in d_values:
        for r in r_values:
            crit = MatchCriteria(d=d, r=r)
            for name, k in groups:
                scores, tp, n_gt, counts = _pooled(tiles, crit, k)
                for p in p_values:
                    rec, ok = recall_at_precision(scores, tp, n_gt, p)
                    report.cells.append({"d": d, "r": r, "p": p, "class": name, "recall": rec,
                                         "precision_reachable": ok, "n_gt": n_gt, **counts})
    return report


def evaluate_maps(pred: VectorMap, gt: VectorMap, **kw) -> EvalReport:
    return evaluate_tiles([(pred.elements(), gt.elements())], **kw)


def evaluate(pred_path, gt_path, **kw) -> EvalReport:
    return evaluate_maps(read_map(pred_path), read_map(gt_path), **kw)


@dataclass
class ConnectionReport:
    recall: float
    probabilities: np.ndarray   # best predicted probability per gt link (-1 if unmatched)
    unmatched: int              # links with an endpoint instance no prediction claimed


def connection_recall(tiles, links: Iterable[tuple[str, str]], c: MatchCriteria | None = None,
                      threshold: float = 0.5) -> ConnectionReport:
    """Fraction of gt cross-tile links whose matched predictions are connected.

    ``tiles`` yields (pred elements, gt elements, TopologyMatrix) per tile. gt
    instances are mapped to predictions through match_tileset; a link counts
    as recovered if the topology entry between its two predictions, in either
    direction, reaches ``threshold``.
    """
    c = c or MatchCriteria()
    owner, prob = {}, {}
    for preds, gts, topo in tiles:
        order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
        m = match_tileset(preds, gts, c)
        for i, j in zip(order, m.gt_of_pred):
            if j is not None:
                owner[gts[j].instance_id] = preds[i].instance_id
        for r, rid in enumerate(topo.row_ids):
            for k, cid in enumerate(topo.col_ids):
                prob[(rid, cid)] = float(topo.values[r, k])
    vals, missing = [], 0
    for a, b in links:
        pa, pb = owner.get(a), owner.get(b)
        if pa is None or pb is None:
            missing += 1
            vals.append(-1.0)
            continue
        vals.append(max(prob.get((pa, pb), 0.0), prob.get((pb, pa), 0.0)))
    vals = np.array(vals, dtype=float)
    rec = float((vals >= threshold).mean()) if len(vals) else 1.0
    return ConnectionReport(rec, vals, missing)


def boundary_endpoint_errors(tiles, c: MatchCriteria | None = None, border_tol: float = 0.5) -> np.ndarray:
    """Endpoint errors (meters) of matched open elements at interior group boundaries.

    ``tiles`` yields (pred elements, gt elements, TileFrame). A gt endpoint
    counts as a group boundary when it lies more than ``border_tol`` pixels
    from the tile border, so ends created by tile clipping are excluded. The
    error is the distance to the nearer predicted endpoint.
    """
    c = c or MatchCriteria()
    out = []
    for preds, gts, frame in tiles:
        x0, y0, x1, y1 = frame.bounds
        tol = border_tol * frame.pixel_size
        order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
        m = match_tileset(preds, gts, c)
        for i, j in zip(order, m.gt_of_pred):
            if j is None or gts[j].closed:
                continue
            p = preds[i].points
            for end in (gts[j].points[0], gts[j].points[-1]):
                border = min(end[0] - x0, x1 - end[0], end[1] - y0, y1 - end[1])
                if border > tol:
                    out.append(float(min(np.hypot(*(p[0] - end)), np.hypot(*(p[-1] - end)))))
    return np.array(out, dtype=float)
