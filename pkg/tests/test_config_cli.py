import json

import numpy as np
import pytest
import yaml

from lanevec import cli
from lanevec.config import ConfigError, load_config, parse_override
from lanevec.mapmodel import LANE_SOLID, ElementInstance, LaneGroup, VectorMap, write_map

SMALL = {
    "world": {"extent_m": [10.24, 10.24], "tile_px": 32, "pixel_size": 0.32, "n_points": 6,
              "road_count": 1, "lanes_per_road": [1, 1]},
    "model": {"n_groups": 2, "n_lines": 4, "n_points": 6, "d_model": 32, "n_heads": 4,
              "decoder_layers": 1, "memory_depth": 2, "image_size": 32,
              "encoder_channels": [8, 8, 16, 16]},
    "train": {"steps": 2, "batch_size": 1},
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def simple_map():
    pts = np.stack([np.linspace(0, 10, 6), np.full(6, 2.0)], axis=1)
    lane = ElementInstance(pts, LANE_SOLID, 1.0, "l0")
    poly = np.array([[0, 1.5], [10, 1.5], [10, 2.5], [0, 2.5]], float)
    return VectorMap((LaneGroup("g0", (lane,), poly),), (), 0.04, 6)


# ---- config layering

def test_layering_order(cfg_file, monkeypatch):
    cfg = load_config(cfg_file, ["train.steps=7"])
    assert cfg["train"]["steps"] == 7 and cfg["model"]["d_model"] == 32
    assert load_config(cfg_file)["train"]["steps"] == 2
    assert load_config(None, use_env=False)["train"]["steps"] != 2
    monkeypatch.setenv("LANEVEC_CONFIG", str(cfg_file))
    assert load_config()["train"]["steps"] == 2


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("train:\n  stepz: 3\n")
    with pytest.raises(ConfigError, match="stepz"):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(None, ["nope.x=1"], use_env=False)
    with pytest.raises(ConfigError):
        parse_override("train.steps")


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        load_config(None, ["world.wear_rate=2.0"], use_env=False)
    with pytest.raises(ConfigError):
        load_config(None, ["eval.p_values=[]"], use_env=False)


# ---- synth

def test_synth_minimal_and_repeatable(cfg_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("synth", "--config", cfg_file, "--out", a) == 0
    assert run("synth", "--config", cfg_file, "--out", b) == 0
    manifest = json.loads((a / "manifest.json").read_text())
    assert len(manifest["tiles"]) == 1
    for key in ("image", "mask", "label"):
        assert (a / manifest["tiles"][0][key]).exists()
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    assert (a / "config.yaml").read_bytes() == (b / "config.yaml").read_bytes()
    assert json.loads((a / "version.json").read_text())["tool"] == "lanevec"


def test_synth_invalid_spec_exits_2(cfg_file, tmp_path, capsys):
    assert run("synth", "--config", cfg_file, "--set", "world.pixel_size=-1", "--out", tmp_path / "x") == 2
    assert "pixel_size" in capsys.readouterr().err


def test_echo_reproduces_outputs(cfg_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run("synth", "--config", cfg_file, "--set", "world.seed=5", "--out", a)
    run("synth", "--config", a / "config.yaml", "--out", b)
    for f in ("manifest.json", "world.jsonl"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


# ---- train and sweep

@pytest.fixture
def trained(cfg_file, tmp_path):
    data, out = tmp_path / "data", tmp_path / "run"
    assert run("synth", "--config", cfg_file, "--out", data) == 0
    assert run("train", "--config", cfg_file, "--data", data, "--out", out) == 0
    return data, out


def test_train_checkpoint_and_resume(cfg_file, trained):
    data, out = trained
    assert (out / "checkpoint_latest.npz").exists()
    assert run("train", "--config", cfg_file, "--set", "train.steps=3", "--data", data, "--out", out) == 0
    steps = [json.loads(l)["step"] for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert steps == [0, 1, 2]


def test_train_missing_data_exits_2(cfg_file, tmp_path):
    assert run("train", "--config", cfg_file, "--data", tmp_path / "none", "--out", tmp_path / "o") == 2


def test_sweep_deterministic_and_corrupt_checkpoint(cfg_file, trained, tmp_path):
    data, out = trained
    ckpt = out / "checkpoint_latest.npz"
    a, b = tmp_path / "sa", tmp_path / "sb"
    assert run("sweep", "--config", cfg_file, "--ckpt", ckpt, "--data", data, "--out", a) == 0
    assert run("sweep", "--config", cfg_file, "--ckpt", ckpt, "--data", data, "--out", b) == 0
    assert (a / "stitched.jsonl").read_bytes() == (b / "stitched.jsonl").read_bytes()
    bad = tmp_path / "bad.npz"
    bad.write_bytes(ckpt.read_bytes()[: len(ckpt.read_bytes()) // 2])
    assert run("sweep", "--ckpt", bad, "--data", data, "--out", tmp_path / "sc") == 3
    assert run("sweep", "--ckpt", tmp_path / "none.npz", "--data", data, "--out", tmp_path / "sd") == 2


# ---- eval and render

def test_eval_gt_vs_gt_and_empty(tmp_path):
    gt, empty = tmp_path / "gt.jsonl", tmp_path / "empty.jsonl"
    write_map(gt, simple_map())
    write_map(empty, VectorMap(n_points=6))
    assert run("eval", "--pred", gt, "--gt", gt, "--out", tmp_path / "e1") == 0
    recs = [json.loads(l) for l in (tmp_path / "e1" / "report.jsonl").read_text().splitlines()]
    assert recs and all(r["recall"] == 1.0 for r in recs)
    assert run("eval", "--pred", empty, "--gt", gt, "--out", tmp_path / "e2") == 0
    recs = [json.loads(l) for l in (tmp_path / "e2" / "report.jsonl").read_text().splitlines()]
    assert all(r["recall"] == 0.0 for r in recs)


def test_eval_format_version_mismatch_exits_2(tmp_path):
    gt = tmp_path / "gt.jsonl"
    write_map(gt, simple_map())
    lines = gt.read_text().splitlines()
    head = json.loads(lines[0])
    head["format_version"] = 99
    bad = tmp_path / "v99.jsonl"
    bad.write_text("\n".join([json.dumps(head)] + lines[1:]) + "\n")
    assert run("eval", "--pred", bad, "--gt", gt, "--out", tmp_path / "e") == 2


def test_render_empty_deterministic_and_bad_class(tmp_path):
    empty = tmp_path / "empty.jsonl"
    write_map(empty, VectorMap(n_points=6))
    assert run("render", "--map", empty, "--out", tmp_path / "a.png") == 0
    assert run("render", "--map", empty, "--out", tmp_path / "b.png") == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert "lane_solid" in (tmp_path / "a.svg").read_text().lower().replace(" ", "_")
    m = tmp_path / "m.jsonl"
    write_map(m, simple_map())
    text = m.read_text().replace(f'"cls":{LANE_SOLID},', '"cls":42,')
    bad = tmp_path / "bad.jsonl"
    bad.write_text(text)
    assert run("render", "--map", bad, "--out", tmp_path / "c.png") == 2


def test_usage_errors_exit_2(capsys):
    assert run() == 2
    assert run("synth") == 2
