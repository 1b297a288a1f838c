import json
import math

import numpy as np
import pytest
import torch

from lanevec import geom, synth
from lanevec.losses import LossWeights
from lanevec.mapmodel import LANE_SOLID, ElementInstance, TopologyMatrix, VectorTilePrediction, serialize_map
from lanevec.net import LaneMapNet, MemoryBank, ModelConfig, PromptRecord
from lanevec.pipeline import (
    InferConfig, SweepError, TrainConfig, TrainingAborted, _prompt_frames, _TileCache, infer_tile, lr_at, prediction_bytes, stitch,
    sweep_city, train, write_sweep,
)
from worlds import arc_length_by_world_element, gt_tile_predictions, orphans


@pytest.fixture(scope="module")
def small_world():
    cfg = ModelConfig(n_groups=2, n_lines=4, n_points=6, d_model=32, n_heads=4, decoder_layers=1,
                      memory_depth=2, image_size=32, encoder_channels=(8, 8, 16, 16),
                      stage_strides=(2, 2, 2, 2))
    spec = synth.banded_spec(0, grid=(2, 3), tile_px=32, pixel_size=0.32, n_points=6)
    return cfg, synth.build_dataset(spec)


def new_model(cfg, seed=0):
    torch.manual_seed(seed)
    return LaneMapNet(cfg)


# ---- training

def test_lr_zero_leaves_parameters(small_world):
    cfg, ds = small_world
    m = new_model(cfg)
    before = {k: v.clone() for k, v in m.state_dict().items()}
    train(m, ds, TrainConfig(steps=1, lr=0.0, batch_size=2))
    for k, v in m.state_dict().items():
        assert torch.equal(before[k], v), k


def test_cosine_endpoint():
    cfg = TrainConfig(steps=500)
    assert lr_at(0, cfg) == cfg.lr
    assert lr_at(499, cfg) <= 1e-2 * cfg.lr
    warm = TrainConfig(steps=100, warmup_steps=10)
    assert lr_at(0, warm) == pytest.approx(warm.lr / 10)
    assert lr_at(10, warm) == pytest.approx(warm.lr)


def test_fixed_batch_loss_decreases(small_world):
    cfg, ds = small_world
    drops = []
    for seed in range(3):
        m = new_model(cfg, seed)
        res = train(m, ds, TrainConfig(steps=200, batch_size=2, seed=seed), fixed_batch=[(0, 1), (1, 1)])
        first = np.mean([r["total"] for r in res.log[:10]])
        last = np.mean([r["total"] for r in res.log[-10:]])
        drops.append(last < first)
    assert np.median(drops) == 1


def test_train_log_checkpoint_and_resume(tmp_path, small_world):
    cfg, ds = small_world
    out = tmp_path / "run"
    tc = TrainConfig(steps=4, batch_size=1, checkpoint_every=2)
    train(new_model(cfg), ds, tc, out_dir=out)
    recs = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [0, 1, 2, 3]
    assert {"lr", "L_l", "L_t", "L_g", "L_gl", "L_s", "total"} <= set(recs[0])
    assert (out / "checkpoint_000002.npz").exists() and (out / "checkpoint_latest.npz").exists()
    res = train(new_model(cfg, 9), ds, TrainConfig(steps=6, batch_size=1, checkpoint_every=2), out_dir=out)
    assert [r["step"] for r in res.log] == [4, 5]


def test_nonfinite_loss_aborts_with_dump(tmp_path, small_world):
    cfg, ds = small_world
    m = new_model(cfg)
    with torch.no_grad():
        m.seg_head[-1].bias.fill_(float("nan"))
    with pytest.raises(TrainingAborted):
        train(m, ds, TrainConfig(steps=1, batch_size=1), out_dir=tmp_path)
    dump = json.loads((tmp_path / "nonfinite_dump.json").read_text())
    assert dump["step"] == 0 and dump["tiles"]


def test_gt_prompts_t0_is_per_tile_training(small_world):
    cfg, ds = small_world
    zero = ModelConfig(**{**cfg.__dict__, "memory_depth": 0})
    a, b = new_model(zero, 1), new_model(zero, 1)
    train(a, ds, TrainConfig(steps=3, batch_size=2, prompt_source="ground_truth"))
    train(b, ds, TrainConfig(steps=3, batch_size=2, prompt_source="self_predicted"))
    for k, v in a.state_dict().items():
        assert torch.equal(v, b.state_dict()[k]), k
    x = torch.as_tensor(ds.images[(0, 0)])[None, None]
    a.eval()
    with torch.no_grad():
        assert torch.equal(a(x).points, a(x, [[]]).points)
    assert all(p.grad is None or float(p.grad.abs().sum()) == 0 for p in a.cpe.parameters())


def test_prompt_dropout_bounds(small_world):
    cfg, ds = small_world
    with pytest.raises(ValueError):
        TrainConfig(prompt_dropout=1.5)
    cache = _TileCache(ds, cfg.n_points)
    last = max(ds.frames, key=lambda f: f.scan_order)
    rng = np.random.default_rng(0)
    kept, rows = _prompt_frames(cache, last, 2, "ground_truth", 1.0, rng, 5, dropout=0.0)
    assert len(kept) == 2 and rows
    assert _prompt_frames(cache, last, 2, "ground_truth", 1.0, rng, 5, dropout=1.0) == ([], [])


# ---- inference

def test_infer_tile_memory_and_order(small_world):
    cfg, ds = small_world
    m = new_model(cfg).eval()
    mem = MemoryBank(cfg.memory_depth)
    frames = sorted(ds.frames, key=lambda f: f.scan_order)
    for k, f in enumerate(frames, start=1):
        pred, mem = infer_tile(m, ds.images[f.tile_index], mem, f)
        assert len(mem) == min(k, cfg.memory_depth)
        if k == 1:
            assert pred.topology.values.shape[0] == 0
    with pytest.raises(SweepError):
        infer_tile(m, ds.images[frames[0].tile_index], mem, frames[0])


def test_sweep_determinism_and_shuffle(small_world, tmp_path):
    cfg, ds = small_world
    m = new_model(cfg).eval()
    icfg = InferConfig(element_threshold=0.0, polygon_threshold=0.0)
    a = sweep_city(m, ds.frames, ds.images, icfg)
    shuffled = list(reversed(ds.frames))
    b = sweep_city(m, shuffled, ds.images, icfg)
    assert serialize_map(a.map) == serialize_map(b.map)
    for pa, pb in zip(a.tiles, b.tiles):
        assert prediction_bytes(pa, cfg.n_points) == prediction_bytes(pb, cfg.n_points)
    write_sweep(a, tmp_path, cfg.n_points)
    assert (tmp_path / "stitched.jsonl").read_bytes() == serialize_map(a.map)
    assert len(list((tmp_path / "predictions").glob("*.jsonl"))) == len(ds.frames)
    assert "merges" in json.loads((tmp_path / "stitch_report.json").read_text())


def test_sweep_causality(small_world):
    cfg, ds = small_world
    m = new_model(cfg).eval()
    icfg = InferConfig(element_threshold=0.0)
    full = sweep_city(m, ds.frames, ds.images, icfg)
    for k in range(len(ds.frames)):
        cut = sweep_city(m, ds.frames, ds.images, icfg, stop_after=k)
        assert prediction_bytes(cut.tiles[k], cfg.n_points) == prediction_bytes(full.tiles[k], cfg.n_points)
        # later images cannot reach tile k: replace them and compare again
        images = dict(ds.images)
        for f in ds.frames:
            if f.scan_order > k:
                images[f.tile_index] = np.zeros_like(images[f.tile_index])
        other = sweep_city(m, ds.frames, images, icfg)
        assert prediction_bytes(other.tiles[k], cfg.n_points) == prediction_bytes(full.tiles[k], cfg.n_points)


def test_single_tile_sweep_equals_infer(small_world):
    cfg, ds = small_world
    m = new_model(cfg).eval()
    f = [f for f in ds.frames if f.scan_order == 0]
    res = sweep_city(m, f, ds.images)
    pred, _ = infer_tile(m, ds.images[f[0].tile_index], MemoryBank(cfg.memory_depth), f[0])
    assert prediction_bytes(res.tiles[0], cfg.n_points) == prediction_bytes(pred, cfg.n_points)
    assert res.report.merges == 0


def test_missing_tile_image(small_world):
    cfg, ds = small_world
    images = {k: v for k, v in ds.images.items() if k != (1, 2)}
    with pytest.raises(SweepError, match=r"\[1, 2\]"):
        sweep_city(new_model(cfg).eval(), ds.frames, images)


# ---- stitching

def two_tile_case(prob):
    frames = synth.tile_grid((20.48, 10.24), 64, 0.16)
    left = ElementInstance(geom.resample_polyline([[2, 5], [10.24, 5.2]], 10), LANE_SOLID, 0.9, "a")
    right = ElementInstance(geom.resample_polyline([[10.24, 5.2], [18, 5.5]], 10), LANE_SOLID, 0.8, "b")
    p0 = VectorTilePrediction(frames[0], (left,), (), np.zeros((64, 64)), TopologyMatrix.empty(("a",)))
    p1 = VectorTilePrediction(frames[1], (right,), (), np.zeros((64, 64)),
                              TopologyMatrix(np.array([[prob]]), ("a",), ("b",)))
    return [p0, p1], left, right


def test_stitch_two_tiles_merges():
    preds, left, right = two_tile_case(0.9)
    out, rep = stitch(preds)
    (e,) = out.elements()
    total = geom.polyline_length(left.points) + geom.polyline_length(right.points)
    assert math.isclose(geom.polyline_length(e.points), total, rel_tol=1e-3)
    assert set(e.source_ids) == {"a", "b"} and rep.merges == 1
    assert out.provenance == ((0, 0), (0, 1))


def test_stitch_zero_topology_is_disjoint_union():
    preds, left, right = two_tile_case(0.0)
    out, rep = stitch(preds)
    assert sorted(e.instance_id for e in out.elements()) == ["a", "b"]
    assert rep.merges == 0


def test_stitch_fanout_keeps_best_link():
    frames = synth.tile_grid((20.48, 10.24), 64, 0.16)
    a = ElementInstance(geom.resample_polyline([[2, 5], [10.24, 5]], 10), LANE_SOLID, 1.0, "a")
    b = ElementInstance(geom.resample_polyline([[10.24, 5], [18, 5]], 10), LANE_SOLID, 1.0, "b")
    c = ElementInstance(geom.resample_polyline([[10.24, 5.3], [18, 5.3]], 10), LANE_SOLID, 1.0, "c")
    p0 = VectorTilePrediction(frames[0], (a,), (), np.zeros((64, 64)), TopologyMatrix.empty(("a",)))
    p1 = VectorTilePrediction(frames[1], (b, c), (), np.zeros((64, 64)),
                              TopologyMatrix(np.array([[0.7, 0.9]]), ("a",), ("b", "c")))
    out, rep = stitch([p0, p1])
    merged = [e for e in out.elements() if len(e.source_ids) > 1]
    assert [set(e.source_ids) for e in merged] == [{"a", "c"}]
    assert rep.fanout_dropped == 1


def test_stitch_gt_injection_3x3():
    ds = synth.build_dataset(synth.banded_spec(6, grid=(3, 3)))
    preds = gt_tile_predictions(ds)
    out, rep = stitch(preds)
    assert not orphans(out, preds)
    got = arc_length_by_world_element(out.elements())
    want = {e.instance_id: geom.polyline_length(e.points) for e in ds.world.elements()}
    assert got.keys() == want.keys()
    for k in want:
        assert abs(got[k] - want[k]) / want[k] < 0.01
    assert rep.merges == len(ds.links) and rep.broken_cycles == 0


def test_stitch_conservation_random_topology():
    ds = synth.build_dataset(synth.banded_spec(7, grid=(2, 3)))
    rng = np.random.default_rng(0)
    preds = gt_tile_predictions(ds)
    for p in preds:
        p.topology.values[:] = rng.random(p.topology.values.shape)
    out, rep = stitch(preds)
    assert not orphans(out, preds)
