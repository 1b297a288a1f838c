"""Training loop, sequential zig-zag sweep with prompt memory, and cross-tile stitching."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import geom
from .losses import LossWeights, NonFiniteLossError, Target, compute_losses
from .mapmodel import (
    ElementInstance, LaneGroup, TileFrame, TopologyMatrix, VectorMap, VectorTilePrediction,
    join_polylines, organize_groups, serialize_map, topology_record,
)
from .net import (
    LaneMapNet, MemoryBank, PromptRecord, load_checkpoint, record_to_frame,
    save_checkpoint,
)
from .synth import SynthDataset, connected

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 4
    steps: int = 2000
    lr: float = 6e-4
    weight_decay: float = 0.01
    warmup_steps: int = 0
    grad_clip: float | None = 35.0
    seed: int = 0
    prompt_source: str = "mixed"   # ground_truth | self_predicted | mixed
    prompt_p: float = 0.5          # P(gt prompt) under "mixed"
    prompt_dropout: float = 0.0    # P(a history frame is left out of the prompt)
    checkpoint_every: int = 0
    log_every: int = 1
    cache_threshold: float = 0.4

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.prompt_source not in ("ground_truth", "self_predicted", "mixed"):
            raise ValueError(f"unknown prompt_source {self.prompt_source!r}")
        if not 0 <= self.prompt_p <= 1 or not 0 <= self.prompt_dropout <= 1:
            raise ValueError("prompt_p and prompt_dropout must lie in [0, 1]")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size >= 1 and steps >= 0 required")


@dataclass
class InferConfig:
    element_threshold: float = 0.4
    polygon_threshold: float = 0.5
    topology_threshold: float = 0.5


class TrainingAborted(RuntimeError):
    pass


class SweepError(RuntimeError):
    pass


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to zero at ``cfg.steps``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    t = min(1.0, (step - cfg.warmup_steps) / span)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * t))


def make_optimizer(model: LaneMapNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


# ---------------------------------------------------------------- targets

def build_target(groups_px: Sequence[LaneGroup], frame: TileFrame, n_points: int,
                 prompt_rows: Sequence[ElementInstance | None] = (),
                 gt_world: Sequence[ElementInstance] = (), mask=None) -> Target:
    norm = frame.pixel_to_normalized
    elems, group_idx = [], []
    polygons, rings = [], []
    for k, g in enumerate(groups_px):
        poly = norm(g.polygon)
        polygons.append(poly)
        rings.append(geom.resample_ring(poly, n_points))
        for e in g.elements:
            elems.append(e)
            group_idx.append(k)
    G = len(elems)
    pts = np.stack([norm(e.points) for e in elems]) if G else np.zeros((0, n_points, 2))
    topo = np.zeros((len(prompt_rows), G))
    for i, row in enumerate(prompt_rows):
        if row is None:
            continue
        for j, col in enumerate(gt_world):
            if connected(row, col):
                topo[i, j] = 1.0
    return Target(
        cls=np.array([e.cls for e in elems], dtype=int),
        points=pts,
        closed=np.array([e.closed for e in elems], dtype=bool),
        group=np.array(group_idx, dtype=int),
        polygons=polygons,
        polygon_points=np.stack(rings) if rings else np.zeros((0, n_points, 2)),
        mask=np.zeros((frame.height_px, frame.width_px), bool) if mask is None else np.asarray(mask),
        topology=topo,
        ids=tuple(e.instance_id for e in elems),
    )


def scan_history(frames: Sequence[TileFrame], frame: TileFrame, depth: int) -> list[TileFrame]:
    """The ``depth`` tiles scanned immediately before ``frame``, oldest first."""
    ordered = sorted(frames, key=lambda f: f.scan_order)
    earlier = [f for f in ordered if f.scan_order < frame.scan_order]
    return earlier[len(earlier) - depth:] if depth else []


# ---------------------------------------------------------------- decoding

def decode_predictions(model: LaneMapNet, raw, b: int, frame: TileFrame,
                       icfg: InferConfig) -> tuple[list[ElementInstance], list[int], list]:
    """Thresholded elements (world frame) with their query indices, plus group polygons."""
    n_cls = model.cfg.n_classes
    probs = raw.element_log_probs()[b].exp().detach().cpu().numpy()
    fg = probs[:, :n_cls]
    scores = fg.max(1)
    classes = fg.argmax(1)
    pts = raw.points[b].detach().cpu().numpy().astype(float)
    r, c = frame.tile_index
    elems, queries = [], []
    for i in np.flatnonzero(scores >= icfg.element_threshold):
        world = frame.normalized_to_world(pts[i])
        if geom.polyline_length(world) == 0:
            continue
        elems.append(ElementInstance(world, int(classes[i]), float(scores[i]), f"t{r}_{c}.q{i}"))
        queries.append(int(i))
    pprob = raw.polygon_log_probs()[b].exp().detach().cpu().numpy()[:, 0]
    ppts = raw.poly_points[b].detach().cpu().numpy().astype(float)
    polys = []
    for j in np.flatnonzero(pprob >= icfg.polygon_threshold):
        try:
            polys.append((geom.as_polygon(frame.normalized_to_world(ppts[j])), float(pprob[j])))
        except geom.GeometryError:
            continue
    return elems, queries, polys


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: LaneMapNet
    log: list
    step: int


class _TileCache:
    """Static per-tile tensors and the self-prediction cache used for prompts."""

    def __init__(self, ds: SynthDataset, n_points: int):
        self.ds = ds
        self.frames = sorted(ds.frames, key=lambda f: f.scan_order)
        self.gt_world = {f.tile_index: ds.gt_elements_world(f.tile_index) for f in self.frames}
        self.groups_px = {f.tile_index: ds.gt_groups_pixel(f.tile_index) for f in self.frames}
        self.n_points = n_points
        self.predicted: dict = {}  # tile -> (elements world, matched gt element or None)


def _prompt_frames(cache: _TileCache, frame: TileFrame, depth: int, source: str, p_gt: float,
                   rng: np.random.Generator, n_classes: int, dropout: float = 0.0):
    frames, rows = [], []
    for h in scan_history(cache.frames, frame, depth):
        if dropout and rng.random() < dropout:
            continue
        use_gt = (source == "ground_truth"
                  or (source == "mixed" and rng.random() < p_gt)
                  or h.tile_index not in cache.predicted)
        if use_gt:
            elems = cache.gt_world[h.tile_index]
            matched = list(elems)
        else:
            elems, matched = cache.predicted[h.tile_index]
        frames.append(record_to_frame(PromptRecord(h.tile_index, tuple(elems)), frame, n_classes))
        rows.extend(matched)
    return frames, rows


def train(model: LaneMapNet, dataset: SynthDataset, cfg: TrainConfig,
          weights: LossWeights | None = None, out_dir=None, tiles: Sequence | None = None,
          callback: Callable[[int, dict], None] | None = None,
          fixed_batch: Sequence | None = None) -> TrainResult:
    """Optimize ``model`` on the dataset tiles.

    With ``out_dir``, writes ``train_log.jsonl`` and checkpoints, and resumes
    from ``checkpoint_latest.npz`` when present. ``fixed_batch`` pins every
    step to the same tile indices.
    """
    weights = weights or LossWeights()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    cache = _TileCache(dataset, model.cfg.n_points)
    pool = [tuple(t) for t in tiles] if tiles is not None else [f.tile_index for f in cache.frames]
    by_index = {f.tile_index: f for f in cache.frames}
    opt = make_optimizer(model, cfg)
    start = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        latest = out / "checkpoint_latest.npz"
        if latest.exists():
            loaded, start, opt_loaded, _ = load_checkpoint(latest, lambda m: make_optimizer(m, cfg))
            model.load_state_dict(loaded.state_dict())
            opt.load_state_dict(opt_loaded.state_dict())
            rng = np.random.default_rng([cfg.seed, start])
            torch.manual_seed(cfg.seed + start)
    depth = model.cfg.memory_depth
    icfg = InferConfig(element_threshold=cfg.cache_threshold)
    records = []
    log_fh = open(out / "train_log.jsonl", "a") if out is not None else None
    try:
        for step in range(start, cfg.steps):
            model.train()
            lr = lr_at(step, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            if fixed_batch is not None:
                batch = [tuple(t) for t in fixed_batch]
            else:
                batch = [pool[i] for i in rng.integers(0, len(pool), size=cfg.batch_size)]
            images, prompt_frames, targets, rows_all = [], [], [], []
            for idx in batch:
                f = by_index[idx]
                images.append(dataset.images[idx])
                frames, rows = _prompt_frames(cache, f, depth, cfg.prompt_source, cfg.prompt_p, rng,
                                              model.cfg.n_classes, cfg.prompt_dropout)
                prompt_frames.append(frames)
                rows_all.append(rows)
                targets.append(build_target(cache.groups_px[idx], f, model.cfg.n_points, rows,
                                            cache.gt_world[idx], dataset.masks[idx]))
            x = torch.as_tensor(np.stack(images), dtype=torch.float32)[:, None]
            raw = model(x, prompt_frames)
            try:
                bl = compute_losses(raw, targets, weights)
            except NonFiniteLossError as exc:
                dump = {"step": step, "tiles": [list(t) for t in batch], "term": exc.term,
                        "error": str(exc)}
                if out is not None:
                    (out / "nonfinite_dump.json").write_text(json.dumps(dump, indent=1))
                raise TrainingAborted(f"non-finite loss at step {step}: {exc}") from exc
            opt.zero_grad(set_to_none=True)
            bl.total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()

            if depth and cfg.prompt_source != "ground_truth":
                for b, idx in enumerate(batch):
                    elems, queries, _ = decode_predictions(model, raw, b, by_index[idx], icfg)
                    owner = bl.element_matches[b].gt_for_pred()
                    gts = cache.gt_world[idx]
                    matched = [gts[owner[q]] if q in owner else None for q in queries]
                    cache.predicted[idx] = (elems, matched)

            rec = {"step": step, "lr": lr, **bl.report}
            records.append(rec)
            if log_fh is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
                log_fh.write(json.dumps(rec) + "\n")
            if callback is not None:
                callback(step, rec)
            done = step + 1
            if out is not None and cfg.checkpoint_every and (done % cfg.checkpoint_every == 0
                                                             or done == cfg.steps):
                save_checkpoint(out / f"checkpoint_{done:06d}.npz", model, done, opt)
                save_checkpoint(out / "checkpoint_latest.npz", model, done, opt)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(model, records, max(start, cfg.steps))


# ---------------------------------------------------------------- inference

@torch.no_grad()
def infer_tile(model: LaneMapNet, image, memory: MemoryBank, frame: TileFrame,
               icfg: InferConfig | None = None) -> tuple[VectorTilePrediction, MemoryBank]:
    icfg = icfg or InferConfig()
    last = memory.last_scan_order
    if frame.scan_order <= last:
        raise SweepError(f"tile {frame.tile_index} (scan_order {frame.scan_order}) "
                         f"arrived after scan_order {last}")
    model.eval()
    frames = memory.frames(frame, model.cfg.n_classes)
    x = torch.as_tensor(np.asarray(image), dtype=torch.float32)[None, None]
    raw = model(x, [frames])
    elems, queries, polys = decode_predictions(model, raw, 0, frame, icfg)
    r, c = frame.tile_index
    groups = organize_groups(elems, polys, id_prefix=f"t{r}_{c}.g")
    prompt = raw.prompts[0]
    topo_vals = torch.sigmoid(raw.topo_logits[0]).cpu().numpy().astype(float)
    topo = TopologyMatrix(topo_vals[:, queries] if prompt.size else np.zeros((0, len(queries))),
                          prompt.ids, tuple(e.instance_id for e in elems))
    pred = VectorTilePrediction(
        tile=frame, elements=tuple(elems), group_polygons=tuple(polys),
        fg_mask=torch.sigmoid(raw.seg_logits[0]).cpu().numpy(), topology=topo,
        groups=tuple(groups))
    memory.push(PromptRecord(frame.tile_index, tuple(elems)))
    memory.last_scan_order = frame.scan_order
    return pred, memory


# ---------------------------------------------------------------- stitching

@dataclass
class StitchReport:
    merges: int = 0
    chains: int = 0
    broken_cycles: int = 0
    fanout_dropped: int = 0
    degree_dropped: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        return True


def stitch(preds: Sequence[VectorTilePrediction], threshold: float = 0.5,
           n_points: int | None = None, pixel_size: float | None = None) -> tuple[VectorMap, StitchReport]:
    """Merge per-tile predictions into one world map using predicted topology.

    Accepted links (probability >= threshold, same class, open shapes) are
    reduced so each instance keeps at most its best link into any one
    neighbor tile; chains are then assembled greedily by probability, never
    exceeding two links per instance and never closing a cycle.
    """
    report = StitchReport()
    preds = sorted(preds, key=lambda p: p.tile.scan_order)
    elem: dict[str, ElementInstance] = {}
    tile_of: dict[str, tuple] = {}
    group_of: dict[str, str] = {}
    groups_in: dict[str, LaneGroup] = {}
    for p in preds:
        groups = p.groups or tuple(organize_groups(p.elements, p.group_polygons,
                                                   id_prefix=f"t{p.tile.tile_index[0]}_{p.tile.tile_index[1]}.g"))
        for g in groups:
            groups_in[g.group_id] = g
            for e in g.elements:
                elem[e.instance_id] = e
                tile_of[e.instance_id] = p.tile.tile_index
                group_of[e.instance_id] = g.group_id
    if n_points is None:
        n_points = len(next(iter(elem.values())).points) if elem else 20
    if pixel_size is None:
        pixel_size = preds[0].tile.pixel_size if preds else 0.04

    # candidate links
    cand = []
    for p in preds:
        t = p.topology
        for i, rid in enumerate(t.row_ids):
            for j, cid in enumerate(t.col_ids):
                v = float(t.values[i, j])
                if v < threshold or rid not in elem or cid not in elem:
                    continue
                a, b = elem[rid], elem[cid]
                if a.closed or b.closed or a.cls != b.cls:
                    continue
                cand.append((v, rid, cid))
    # one link per (instance, other tile), keeping the most probable
    best: dict = {}
    for v, a, b in cand:
        for x, y in ((a, b), (b, a)):
            key = (x, tile_of[y])
            if key not in best or v > best[key][0]:
                best[key] = (v, a, b)
    kept = {(a, b): v for (v, a, b) in best.values()}
    survivors = []
    for v, a, b in cand:
        if (a, b) in kept and best[(a, tile_of[b])][1:] == (a, b) and best[(b, tile_of[a])][1:] == (a, b):
            survivors.append((v, a, b))
        else:
            report.fanout_dropped += 1
    survivors = sorted(set(survivors), key=lambda t: (-t[0], t[1], t[2]))

    uf = _UnionFind()
    degree: dict[str, int] = {}
    adj: dict[str, list[str]] = {}
    for v, a, b in survivors:
        if degree.get(a, 0) >= 2 or degree.get(b, 0) >= 2:
            report.degree_dropped += 1
            continue
        if not uf.union(a, b):
            report.broken_cycles += 1
            log.warning("stitch: dropping link %s-%s (p=%.3f) that would close a cycle", a, b, v)
            continue
        degree[a] = degree.get(a, 0) + 1
        degree[b] = degree.get(b, 0) + 1
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)

    # assemble chains
    merged_of: dict[str, ElementInstance] = {}
    seen: set[str] = set()
    for start in sorted(adj):
        if start in seen or len(adj[start]) != 1:
            continue
        chain = [start]
        seen.add(start)
        prev, cur = None, start
        while True:
            nxt = [n for n in adj[cur] if n != prev]
            if not nxt:
                break
            prev, cur = cur, nxt[0]
            chain.append(cur)
            seen.add(cur)
        pts = elem[chain[0]].points
        for iid in chain[1:]:
            pts = join_polylines(pts, elem[iid].points)
        sources = tuple(s for iid in chain for s in elem[iid].source_ids)
        merged = ElementInstance(geom.resample_polyline(pts, n_points), elem[chain[0]].cls,
                                 min(elem[i].score for i in chain), chain[0], sources)
        for iid in chain:
            merged_of[iid] = merged
        report.chains += 1
        report.merges += len(chain) - 1

    # groups joined by merged elements
    guf = _UnionFind()
    for gid in groups_in:
        guf.find(gid)
    for merged in {id(m): m for m in merged_of.values()}.values():
        gids = [group_of[s] for s in merged.sources if s in group_of]
        for g in gids[1:]:
            guf.union(gids[0], g)
    clusters: dict[str, list[str]] = {}
    for gid in groups_in:
        clusters.setdefault(guf.find(gid), []).append(gid)

    out_groups = []
    emitted: set[int] = set()
    for root in sorted(clusters):
        gids = clusters[root]
        members = []
        for gid in gids:
            for e in groups_in[gid].elements:
                m = merged_of.get(e.instance_id, e)
                if id(m) in emitted:
                    continue
                emitted.add(id(m))
                members.append(m)
        if not members:
            continue
        if len(gids) == 1:
            poly = groups_in[gids[0]].polygon
        else:
            poly = geom.min_bounding_rect([e.points for e in members]
                                          + [groups_in[g].polygon for g in gids])
        score = min(groups_in[g].score for g in gids)
        out_groups.append(LaneGroup(root if len(gids) == 1 else f"{root}+", tuple(members), poly, score))
    provenance = tuple(p.tile.tile_index for p in preds)
    return VectorMap(tuple(out_groups), provenance, pixel_size, n_points), report


# ---------------------------------------------------------------- sweep

@dataclass
class SweepResult:
    map: VectorMap
    tiles: list
    report: StitchReport


def sweep_city(model: LaneMapNet, frames: Sequence[TileFrame], images: Mapping,
               icfg: InferConfig | None = None, stop_after: int | None = None) -> SweepResult:
    """Run every tile in scan order with a shared memory bank, then stitch."""
    icfg = icfg or InferConfig()
    ordered = sorted(frames, key=lambda f: f.scan_order)
    if stop_after is not None:
        ordered = [f for f in ordered if f.scan_order <= stop_after]
    memory = MemoryBank(model.cfg.memory_depth)
    out = []
    for f in ordered:
        if f.tile_index not in images:
            raise SweepError(f"missing tile image for tile {list(f.tile_index)}")
        pred, memory = infer_tile(model, images[f.tile_index], memory, f, icfg)
        out.append(pred)
    stitched, report = stitch(out, icfg.topology_threshold, model.cfg.n_points,
                              ordered[0].pixel_size if ordered else None)
    return SweepResult(stitched, out, report)


def prediction_bytes(pred: VectorTilePrediction, n_points: int) -> bytes:
    m = VectorMap(pred.groups, (pred.tile.tile_index,), pred.tile.pixel_size, n_points)
    extra = [dict(kind="tile", **pred.tile.to_record()), topology_record(pred.topology)]
    return serialize_map(m, extra)


def write_sweep(result: SweepResult, out_dir, n_points: int) -> None:
    out = Path(out_dir)
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    (out / "stitched.jsonl").write_bytes(serialize_map(result.map))
    for p in result.tiles:
        r, c = p.tile.tile_index
        (out / "predictions" / f"r{r}_c{c}.jsonl").write_bytes(prediction_bytes(p, n_points))
    with open(out / "stitch_report.json", "w") as fh:
        json.dump(result.report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
