"""Bipartite matching and training objective.

The total loss is ``alpha*L_l + beta*L_t + lambda*L_g + eta*L_gl + mu*L_s``
with element, topology, group-polygon, point-in-polygon and segmentation
terms respectively.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from . import geom


@dataclass
class LossWeights:
    alpha: float = 1.0      # elements
    beta: float = 1.0       # topology
    lam: float = 0.2        # group polygons
    eta: float = 0.15       # point-in-polygon
    mu: float = 100.0       # segmentation
    gamma: float = 2.0      # focal exponent
    topo_alpha: float = 0.25
    w_cls: float = 2.0      # matching cost weights
    w_pts: float = 5.0
    target_mode: str = "literal_d"

    def __post_init__(self):
        for k in ("alpha", "beta", "lam", "eta", "mu", "gamma", "topo_alpha", "w_cls", "w_pts"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")
        if self.target_mode not in ("literal_d", "one_minus_d"):
            raise ValueError(f"unknown target_mode {self.target_mode!r}")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        self.term = term
        super().__init__(f"loss term {term!r} is not finite ({value})")


# ---------------------------------------------------------------- matching

def equivalent_orders(n_points: int, closed: bool) -> np.ndarray:
    """Point orders describing the same shape: forward/reversed, plus cyclic shifts if closed."""
    fwd = np.arange(n_points)
    if not closed:
        return np.stack([fwd, fwd[::-1]])
    shifts = [np.roll(fwd, -k) for k in range(n_points)]
    return np.stack(shifts + [s[::-1] for s in shifts])


@dataclass
class MatchResult:
    pred_idx: np.ndarray
    gt_idx: np.ndarray
    orders: list  # per pair: gt point order aligned with the prediction
    cost: float
    n_pred: int

    @property
    def unmatched(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_pred), self.pred_idx)

    def gt_for_pred(self) -> dict[int, int]:
        return {int(i): int(j) for i, j in zip(self.pred_idx, self.gt_idx)}


def point_cost(pred_pts: np.ndarray, gt_pts: np.ndarray, closed) -> tuple[np.ndarray, np.ndarray]:
    """Min over equivalent orders of mean per-point L1; returns (cost (N, G), best order index)."""
    N, G = len(pred_pts), len(gt_pts)
    cost = np.zeros((N, G))
    best = np.zeros((N, G), dtype=int)
    if N == 0 or G == 0:
        return cost, best
    P = gt_pts.shape[1]
    for j in range(G):
        orders = equivalent_orders(P, bool(closed[j]))
        cand = gt_pts[j][orders]  # (K, P, 2)
        d = np.abs(pred_pts[:, None] - cand[None]).sum(-1).mean(-1)  # (N, K)
        best[:, j] = d.argmin(1)
        cost[:, j] = d.min(1)
    return cost, best


def hierarchical_match(pred_probs, pred_pts, gt_cls, gt_pts, gt_closed,
                       w_cls: float = 2.0, w_pts: float = 5.0) -> MatchResult:
    """Instance-level optimal assignment over a cost built from point-level order search.

    ``cost(i, j) = -w_cls * prob_i[class_j] + w_pts * min_order mean L1``.
    """
    probs = np.asarray(pred_probs, dtype=float)
    pp = np.asarray(pred_pts, dtype=float)
    gp = np.asarray(gt_pts, dtype=float)
    gt_cls = np.asarray(gt_cls, dtype=int)
    N, G = len(pp), len(gp)
    if G == 0:
        return MatchResult(np.zeros(0, int), np.zeros(0, int), [], 0.0, N)
    pc, best = point_cost(pp, gp, gt_closed)
    cost = -w_cls * probs[:, gt_cls] + w_pts * pc
    rows, cols = linear_sum_assignment(cost)
    P = gp.shape[1]
    orders = [equivalent_orders(P, bool(gt_closed[j]))[best[i, j]] for i, j in zip(rows, cols)]
    return MatchResult(rows, cols, orders, float(cost[rows, cols].sum()), N)


# ---------------------------------------------------------------- loss terms

def _bce_prob(s, t):
    eps = 1e-12
    s = s.clamp(eps, 1 - eps)
    return -(t * torch.log(s) + (1 - t) * torch.log1p(-s))


def aligned_focal_loss(s: torch.Tensor, matched: torch.Tensor, d: torch.Tensor,
                       gamma: float = 2.0, target_mode: str = "literal_d") -> torch.Tensor:
    """Localization-aligned focal loss, summed over queries.

    Positives: ``|t - s|^gamma * BCE(s, t)`` with ``t = d`` (literal) or ``1 - d``;
    negatives: ``s^gamma * BCE(s, 0)``.
    """
    matched = matched.bool()
    t = d.clamp(0.0, 1.0)
    if target_mode == "one_minus_d":
        t = 1.0 - t
    pos = (t - s).abs().pow(gamma) * _bce_prob(s, t)
    neg = s.pow(gamma) * _bce_prob(s, torch.zeros_like(s))
    return torch.where(matched, pos, neg).sum()


def _edge_cos_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    pe = pred[..., 1:, :] - pred[..., :-1, :]
    ge = gt[..., 1:, :] - gt[..., :-1, :]
    return 1.0 - F.cosine_similarity(pe, ge, dim=-1, eps=1e-12)


def set_loss(log_probs: torch.Tensor, points: torch.Tensor, gt_cls, gt_pts: torch.Tensor,
             match: MatchResult, bg_index: int, gamma: float, target_mode: str) -> dict:
    """Classification, regression and direction terms for one prediction set."""
    N = points.shape[0]
    probs = log_probs.exp()
    s = 1.0 - probs[:, bg_index]  # foreground score for negatives
    d = torch.zeros(N, dtype=points.dtype)
    matched = torch.zeros(N, dtype=torch.bool)
    zero = points.sum() * 0.0
    reg, direction = zero, zero
    if len(match.pred_idx):
        pi = torch.as_tensor(match.pred_idx, dtype=torch.long)
        gi = torch.as_tensor(match.gt_idx, dtype=torch.long)
        order = torch.as_tensor(np.stack(match.orders), dtype=torch.long)
        aligned = gt_pts[gi][torch.arange(len(gi))[:, None], order]  # (k, P, 2)
        pred = points[pi]
        l1 = (pred - aligned).abs().sum(-1)  # (k, P)
        reg = l1.mean()
        direction = _edge_cos_loss(pred, aligned).mean()
        cls_idx = torch.as_tensor(np.asarray(gt_cls)[match.gt_idx], dtype=torch.long)
        s = s.clone()
        s[pi] = probs[pi, cls_idx]
        d = d.clone()
        d[pi] = l1.mean(-1).detach().clamp(0.0, 1.0)
        matched[pi] = True
    cls = aligned_focal_loss(s, matched, d, gamma, target_mode)
    return {"cls": cls, "reg": reg, "dir": direction}


def element_loss(match: MatchResult, log_probs, points, gt_cls, gt_pts, bg_index,
                 gamma: float = 2.0, target_mode: str = "literal_d"):
    out = set_loss(log_probs, points, gt_cls, gt_pts, match, bg_index, gamma, target_mode)
    return out["cls"], out["reg"], out["dir"]


def polygon_edge_distance(points: torch.Tensor, poly: torch.Tensor) -> torch.Tensor:
    """Differentiable distance from points (M, 2) to the nearest polygon edge.

    Ties between edges resolve to the lowest edge index.
    """
    a = poly
    b = torch.roll(poly, -1, dims=0)
    ab = b - a
    ap = points[:, None, :] - a[None]
    t = ((ap * ab).sum(-1) / (ab * ab).sum(-1).clamp_min(1e-300)).clamp(0.0, 1.0)
    diff = ap - t[..., None] * ab
    dist = (diff * diff).sum(-1).clamp_min(1e-30).sqrt()
    return dist.min(dim=1).values


def point_in_polygon_loss(points: torch.Tensor, polygons, assignment) -> torch.Tensor:
    """Sum of nearest-edge distances of points lying outside their assigned polygon.

    points: (n, P, 2) predicted elements; polygons: sequence of (K, 2) arrays;
    assignment[i] is the polygon index for element i (or -1 to skip).
    """
    total = points.sum() * 0.0
    for i, k in enumerate(assignment):
        if k < 0:
            continue
        poly_np = np.asarray(polygons[k], dtype=float)
        pts = points[i]
        inside, _ = geom.points_to_polygon(pts.detach().cpu().numpy().astype(float), poly_np)
        outside = torch.as_tensor(~inside)
        if not outside.any():
            continue
        poly = torch.as_tensor(poly_np, dtype=points.dtype)
        dist = polygon_edge_distance(pts, poly)
        total = total + torch.where(outside, dist, torch.zeros_like(dist)).sum()
    return total


def segmentation_loss(logits: torch.Tensor, mask: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    mask = mask.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, mask)
    p = torch.sigmoid(logits)
    dice = 1.0 - (2.0 * (p * mask).sum() + smooth) / (p.sum() + mask.sum() + smooth)
    return bce + dice


def topology_loss(logits: torch.Tensor, gt: torch.Tensor, gamma: float = 2.0,
                  alpha: float = 0.25) -> torch.Tensor:
    if logits.numel() == 0:
        return logits.sum() * 0.0
    gt = gt.to(logits.dtype)
    ce = F.binary_cross_entropy_with_logits(logits, gt, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * gt + (1 - p) * (1 - gt)
    a_t = alpha * gt + (1 - alpha) * (1 - gt)
    return (a_t * (1 - p_t).pow(gamma) * ce).mean()


TERMS = ("l", "t", "g", "gl", "s")


def total_loss(parts: dict, weights: LossWeights) -> tuple[torch.Tensor, dict]:
    """Weighted sum of the five terms; raises NonFiniteLossError naming a bad term."""
    coef = {"l": weights.alpha, "t": weights.beta, "g": weights.lam, "gl": weights.eta,
            "s": weights.mu}
    report = {}
    total = None
    for k in TERMS:
        v = parts[k]
        val = float(v.detach())
        if not math.isfinite(val):
            raise NonFiniteLossError(k, val)
        report[f"L_{k}"] = val
        term = coef[k] * v
        total = term if total is None else total + term
    report["total"] = float(total.detach())
    return total, report


# ---------------------------------------------------------------- batch objective

@dataclass
class Target:
    """Per-tile supervision in normalized tile coordinates."""

    cls: np.ndarray            # (G,)
    points: np.ndarray         # (G, P, 2)
    closed: np.ndarray         # (G,) bool
    group: np.ndarray          # (G,) index into polygons
    polygons: list             # exact group polygons, (K, 2) each
    polygon_points: np.ndarray  # (N_groups, P, 2) rings resampled for the polygon branch
    mask: np.ndarray           # (H, W) bool
    topology: np.ndarray       # (M_ins, G) against the prompt rows
    ids: tuple = ()


@dataclass
class BatchLoss:
    total: torch.Tensor
    report: dict
    element_matches: list = field(default_factory=list)
    polygon_matches: list = field(default_factory=list)


def compute_losses(raw, targets: list[Target], weights: LossWeights) -> BatchLoss:
    B = len(targets)
    acc = {k: [] for k in TERMS}
    detail = {k: [] for k in ("cls", "reg", "dir", "g_cls", "g_reg", "g_dir")}
    el_lp = raw.element_log_probs()
    pg_lp = raw.polygon_log_probs()
    n_cls = raw.cls_logits.shape[-1] - 1
    el_matches, pg_matches = [], []
    for b, tgt in enumerate(targets):
        dtype = raw.points.dtype
        gt_pts = torch.as_tensor(tgt.points, dtype=dtype)
        with torch.no_grad():
            m = hierarchical_match(el_lp[b].exp().cpu().numpy(), raw.points[b].detach().cpu().numpy(),
                                   tgt.cls, tgt.points, tgt.closed, weights.w_cls, weights.w_pts)
        el = set_loss(el_lp[b], raw.points[b], tgt.cls, gt_pts, m, n_cls, weights.gamma,
                      weights.target_mode)
        el_matches.append(m)

        n_poly = len(tgt.polygon_points)
        P = raw.poly_points.shape[2]
        ring = np.asarray(tgt.polygon_points, dtype=float).reshape(n_poly, P, 2)
        poly_pts = torch.as_tensor(ring, dtype=dtype)
        with torch.no_grad():
            mg = hierarchical_match(pg_lp[b].exp().cpu().numpy(), raw.poly_points[b].detach().cpu().numpy(),
                                    np.zeros(n_poly, int), ring,
                                    np.ones(n_poly, bool), weights.w_cls, weights.w_pts)
        pg = set_loss(pg_lp[b], raw.poly_points[b], np.zeros(n_poly, int), poly_pts, mg, 1,
                      weights.gamma, weights.target_mode)
        pg_matches.append(mg)

        assign = [-1] * raw.points.shape[1]
        for i, j in zip(m.pred_idx, m.gt_idx):
            assign[int(i)] = int(tgt.group[j])
        l_gl = point_in_polygon_loss(raw.points[b], tgt.polygons, assign)

        l_s = segmentation_loss(raw.seg_logits[b], torch.as_tensor(tgt.mask))

        logits = raw.topo_logits[b]
        gt_topo = torch.zeros_like(logits)
        if logits.numel() and len(m.pred_idx):
            topo = torch.as_tensor(tgt.topology, dtype=logits.dtype).reshape(logits.shape[0], -1)
            gt_topo[:, torch.as_tensor(m.pred_idx)] = topo[:, torch.as_tensor(m.gt_idx)]
        l_t = topology_loss(logits, gt_topo, weights.gamma, weights.topo_alpha)

        acc["l"].append(el["cls"] + el["reg"] + el["dir"])
        acc["g"].append(pg["cls"] + pg["reg"] + pg["dir"])
        acc["gl"].append(l_gl)
        acc["s"].append(l_s)
        acc["t"].append(l_t)
        for k in ("cls", "reg", "dir"):
            detail[k].append(float(el[k].detach()))
            detail[f"g_{k}"].append(float(pg[k].detach()))
    parts = {k: torch.stack(v).mean() for k, v in acc.items()}
    total, report = total_loss(parts, weights)
    report.update({k: float(np.mean(v)) for k, v in detail.items()})
    return BatchLoss(total, report, el_matches, pg_matches)
