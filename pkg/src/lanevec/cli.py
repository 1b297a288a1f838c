"""Command-line entry point: synth, train, sweep, eval, render.

Exit codes: 0 success, 2 usage or configuration error, 3 corrupt data or checkpoint.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .config import (
    ConfigError, dump_config, infer_config, load_config, loss_weights, model_config,
    train_config, world_spec,
)
from .mapmodel import MapFormatError, read_map
from .metrics import evaluate_maps
from .net import CheckpointError, LaneMapNet, load_checkpoint
from .pipeline import SweepError, TrainingAborted, sweep_city, train, write_sweep
from .render import RenderError, to_png, to_svg
from .synth import DatasetError, SpecError, build_dataset, load_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3

log = logging.getLogger("lanevec")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _stamp(out_dir: Path, cfg: dict, command: str, prefix: str = "") -> None:
    """Effective config echo and version stamp; the timestamp lives in its own sidecar."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{prefix}config.yaml").write_text(dump_config(cfg))
    (out_dir / f"{prefix}version.json").write_text(
        json.dumps({"tool": "lanevec", "version": __version__, "command": command}, sort_keys=True) + "\n")
    (out_dir / f"{prefix}timestamp.json").write_text(
        json.dumps({"utc": _dt.datetime.now(_dt.timezone.utc).isoformat()}) + "\n")


def _config(args) -> dict:
    try:
        return load_config(args.config, args.set)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None


def _dataset(path):
    root = Path(path)
    if not root.is_dir():
        raise CliError(f"data directory {root} does not exist", EXIT_USAGE)
    try:
        return load_dataset(root)
    except (DatasetError, MapFormatError, SpecError, OSError, KeyError) as exc:
        raise CliError(f"bad dataset {root}: {exc}", EXIT_DATA) from None


def cmd_synth(args) -> int:
    cfg = _config(args)
    try:
        spec = world_spec(cfg)
        ds = build_dataset(spec)
    except (ConfigError, SpecError) as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    out = Path(args.out)
    ds.write(out)
    _stamp(out, cfg, "synth")
    print(f"wrote {len(ds.frames)} tiles, {len(ds.links)} cross-tile links to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _dataset(args.data)
    mcfg, tcfg, weights = model_config(cfg), train_config(cfg), loss_weights(cfg)
    if mcfg.image_size != ds.spec.tile_px or mcfg.n_points != ds.spec.n_points:
        raise CliError(f"model.image_size/n_points ({mcfg.image_size}/{mcfg.n_points}) do not match the "
                       f"dataset ({ds.spec.tile_px}/{ds.spec.n_points})", EXIT_USAGE)
    if not tcfg.checkpoint_every:
        tcfg.checkpoint_every = max(tcfg.steps, 1)
    out = Path(args.out)
    _stamp(out, cfg, "train")
    torch.manual_seed(tcfg.seed)
    model = LaneMapNet(mcfg)
    try:
        res = train(model, ds, tcfg, weights, out_dir=out)
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    except TrainingAborted as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    print(f"trained to step {res.step}; checkpoints in {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    try:
        model, step, _, _ = load_checkpoint(args.ckpt)
    except FileNotFoundError:
        raise CliError(f"checkpoint {args.ckpt} not found", EXIT_USAGE) from None
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    ds = _dataset(args.data)
    if model.cfg.image_size != ds.spec.tile_px:
        raise CliError("checkpoint image size does not match the dataset tiles", EXIT_USAGE)
    try:
        res = sweep_city(model, ds.frames, ds.images, infer_config(cfg))
    except SweepError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    out = Path(args.out)
    write_sweep(res, out, model.cfg.n_points)
    _stamp(out, dict(cfg, checkpoint={"path": str(args.ckpt), "step": step}), "sweep")
    print(f"swept {len(res.tiles)} tiles; {len(res.map.elements())} elements; {res.report.to_dict()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    try:
        pred, gt = read_map(args.pred), read_map(args.gt)
    except FileNotFoundError as exc:
        raise CliError(f"no such file: {exc.filename}", EXIT_USAGE) from None
    except MapFormatError as exc:
        raise CliError(f"map format error: {exc}", EXIT_USAGE) from None
    ev = cfg["eval"]
    report = evaluate_maps(pred, gt, d_values=ev["d_values"], r_values=ev["r_values"],
                           p_values=ev["p_values"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = report.to_table()
    (out / "report.txt").write_text(table)
    (out / "report.jsonl").write_text(report.to_records())
    _stamp(out, cfg, "eval")
    print(table)
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _config(args)
    try:
        m = read_map(args.map)
        gt = read_map(args.gt) if args.gt else None
    except FileNotFoundError as exc:
        raise CliError(f"no such file: {exc.filename}", EXIT_USAGE) from None
    except MapFormatError as exc:
        raise CliError(f"map format error: {exc}", EXIT_USAGE) from None
    target = Path(args.out)
    stem = target.with_suffix("") if target.suffix.lower() in (".png", ".svg") else target
    try:
        svg = to_svg(m, gt)
        png = to_png(m, gt)
    except RenderError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".svg").write_text(svg)
    png.save(stem.with_suffix(".png"), optimize=False)
    _stamp(stem.parent, cfg, "render", prefix=f"{stem.name}.")
    print(f"wrote {stem.with_suffix('.svg')} and {stem.with_suffix('.png')}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lanevec", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"lanevec {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", default=None, help="YAML config file (default: $LANEVEC_CONFIG)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.steps=10")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic world and its tiles")
    sp.add_argument("--out", required=True)
    sp = add("train", cmd_train, "train a model (resumes from the latest checkpoint in --out)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp = add("sweep", cmd_sweep, "sequential inference over all tiles, then stitching")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp = add("eval", cmd_eval, "recall-at-precision report for a predicted map")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    sp = add("render", cmd_render, "draw a map as SVG and PNG")
    sp.add_argument("--map", required=True)
    sp.add_argument("--gt", default=None, help="optional ground truth drawn side by side")
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"lanevec {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
