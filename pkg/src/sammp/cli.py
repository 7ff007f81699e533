"""Command-line entry point: ``sammp <subcommand> ...``.

Exit codes: 0 success, 2 usage error (bad flags, missing files, invalid
config), 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import model as M
from .baseline import CVForecaster, tune_cv
from .errors import ConfigError, ParseError, SammpError, UsageError
from .forecast import forecast_to_json, write_density_grid
from .scenes import load_manifest_windows, split_dataset, write_manifest, write_tracks_csv
from .synthetic import GenConfig, FOLLOWING_CONFIG, bimodal_pair_tracks, generate_scene
from .training import TrainConfig, ModelForecaster, evaluate, export_attention, forecast_windows, train

log = logging.getLogger("sammp")

DEFAULT_FRACTIONS = (0.7, 0.15, 0.15)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    unknown = set(doc) - {"model", "train", "gen"}
    if unknown:
        raise ConfigError(f"{p}: unknown config sections {sorted(unknown)}")
    return doc


def _model_config(args, config: dict) -> M.ModelConfig:
    base = M.ModelConfig.full() if args.size == "full" else M.ModelConfig.desk()
    overrides = config.get("model", {})
    return M.ModelConfig.from_dict({**base.to_dict(), **overrides})


def _train_config(args, config: dict) -> TrainConfig:
    doc = {**TrainConfig().to_dict(), **config.get("train", {})}
    for flag, key in (("epochs", "epochs"), ("steps", "max_steps"), ("lr", "lr"), ("batch_size", "batch_size")):
        value = getattr(args, flag, None)
        if value is not None:
            doc[key] = value
    if args.seed is not None:
        doc["seed"] = args.seed
    return TrainConfig.from_dict(doc)


def _require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split_windows(manifest: Path, split: str, stride: int):
    windows, doc = load_manifest_windows(manifest, stride=stride)
    parts = dict(zip(("train", "val", "test"), split_dataset(windows, doc["fractions"], doc["seed"])))
    if split not in parts:
        raise UsageError(f"unknown split {split!r}")
    return parts, doc


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> None:
    out = _out_dir(args)
    config = _read_config(args.config)
    seed = 0 if args.seed is None else args.seed
    fractions = tuple(args.fractions) if args.fractions else DEFAULT_FRACTIONS
    files, labels = [], []
    if args.kind == "bimodal":
        for pair in range(args.n_scenes):
            for tracks, label in bimodal_pair_tracks(seed, pair):
                name = f"pair{pair:04d}_{label['branch']}.csv"
                write_tracks_csv(out / name, tracks)
                files.append(name)
                labels.append({**label, "file": name})
    else:
        base = FOLLOWING_CONFIG if args.kind == "following" else GenConfig()
        doc = {**base.__dict__, **config.get("gen", {}), "seed": seed}
        if "speed_range" in doc:
            doc["speed_range"] = tuple(doc["speed_range"])
        try:
            cfg = GenConfig(**doc)
        except TypeError as exc:
            raise ConfigError(f"invalid gen config: {exc}") from None
        for i in range(args.n_scenes):
            scene = generate_scene(cfg, i)
            name = f"scene{i:04d}.csv"
            write_tracks_csv(out / name, scene.tracks())
            files.append(name)
            labels.append({"file": name, "scene_id": f"scene{i:04d}", "lane_changes": scene.lane_changes})
    extra = {"kind": args.kind}
    if args.kind == "bimodal":
        extra["labels"] = labels
        write_manifest(out / "manifest.json", files, seed, fractions, **extra)
    else:
        write_manifest(out / "manifest.json", files, seed, fractions, **extra)
        _dump_json(out / "events.json", labels)
    print(f"wrote {len(files)} track files and {out / 'manifest.json'}")


def cmd_train(args) -> None:
    manifest = _require_file(args.data, "dataset manifest")
    config = _read_config(args.config)
    model_config = _model_config(args, config)
    train_config = _train_config(args, config)
    parts, _ = _split_windows(manifest, "train", args.stride)
    out = _out_dir(args)
    params, tlog = train(
        parts["train"].windows,
        model_config,
        train_config,
        val_windows=parts["val"].windows or None,
        checkpoint_dir=out / "checkpoints" if train_config.checkpoint_every else None,
    )
    M.save_checkpoint(out / "model", params, model_config)
    (out / "train_log.csv").write_text(tlog.to_csv())
    _dump_json(out / "train_config.json", {"model": model_config.to_dict(), "train": train_config.to_dict()})
    print(f"trained {len(tlog.steps)} steps; final loss {tlog.steps[-1][3]:.4f}; checkpoint {out / 'model'}")


def _forecaster(args, parts):
    if args.baseline == "cv":
        if args.q is not None and args.r is not None:
            return CVForecaster(args.q, args.r), {"kind": "cv", "q": args.q, "r": args.r}
        train_windows = parts["train"].windows
        if not train_windows:
            raise UsageError("tuning the CV baseline needs a non-empty train split (or pass --q and --r)")
        hist = np.concatenate([w.history for w in train_windows])
        fut = np.concatenate([w.future for w in train_windows])
        q, r = tune_cv(hist, fut)
        return CVForecaster(q, r), {"kind": "cv", "q": q, "r": r}
    if args.checkpoint is None:
        raise UsageError("pass --checkpoint or --baseline cv")
    params, cfg = M.load_checkpoint(_require_file(Path(args.checkpoint) / M.MANIFEST_NAME, "checkpoint").parent)
    return ModelForecaster(params, cfg), {"kind": "model", "checkpoint": str(args.checkpoint)}


def cmd_eval(args) -> None:
    manifest = _require_file(args.data, "dataset manifest")
    parts, _ = _split_windows(manifest, args.split, args.stride)
    forecaster, info = _forecaster(args, parts)
    report = evaluate(forecaster, parts[args.split].windows)
    if args.scope != "both":
        report = report.restricted(args.scope)
    out = _out_dir(args)
    (out / "metrics.csv").write_text(report.to_csv())
    doc = json.loads(report.to_json())
    doc["forecaster"] = info
    doc["split"] = args.split
    _dump_json(out / "metrics.json", doc)
    print(report.to_csv(), end="")


def _pick_window(args):
    manifest = _require_file(args.data, "dataset manifest")
    parts, _ = _split_windows(manifest, args.split, args.stride)
    windows = parts[args.split].windows
    if not 0 <= args.window < len(windows):
        raise UsageError(f"window {args.window} out of range: split {args.split!r} has {len(windows)} windows")
    return parts, windows[args.window]


def cmd_forecast(args) -> None:
    parts, window = _pick_window(args)
    forecaster, info = _forecaster(args, parts)
    (fc,) = forecast_windows(forecaster, [window])
    out = _out_dir(args)
    doc = {
        "scene_id": window.scene_id,
        "t0": window.t0,
        "ego_index": window.ego_index,
        "n_pred": fc.n_pred,
        "n_mix": fc.n_mix,
        "forecaster": info,
        "vehicles": forecast_to_json(fc, list(window.vehicle_ids)),
    }
    _dump_json(out / "forecast.json", doc)
    if args.heatmap:
        v = window.ego_index if args.vehicle is None else args.vehicle
        if not 0 <= v < window.n_veh:
            raise UsageError(f"vehicle {v} out of range for a window of {window.n_veh}")
        lo = np.minimum(window.future[v].min(axis=0), fc.mean[v].min(axis=(0, 1))) - 5.0
        hi = np.maximum(window.future[v].max(axis=0), fc.mean[v].max(axis=(0, 1))) + 5.0
        steps = [k for k in (5, 10, 15, 20, 25) if k <= fc.n_pred]
        write_density_grid(out / "density.csv", fc, v, steps, (lo[0], hi[0]), (lo[1], hi[1]))
    print(f"wrote {out / 'forecast.json'}")


def cmd_attention(args) -> None:
    _, window = _pick_window(args)
    params, cfg = M.load_checkpoint(_require_file(Path(args.checkpoint) / M.MANIFEST_NAME, "checkpoint").parent)
    doc = export_attention(params, cfg, window, lane_width=args.lane_width)
    doc["scene_id"] = window.scene_id
    doc["t0"] = window.t0
    out = _out_dir(args)
    _dump_json(out / "attention.json", doc)
    print(f"wrote {out / 'attention.json'}")


def cmd_bench_bimodal(args) -> None:
    from .bench import BIMODAL_TRAIN, run_bimodal_benchmark

    config = _read_config(args.config)
    model_config = _model_config(args, config)
    doc = {**BIMODAL_TRAIN.to_dict(), **config.get("train", {})}
    if args.steps is not None:
        doc["max_steps"] = args.steps
    train_config = TrainConfig.from_dict(doc)
    seed = 0 if args.seed is None else args.seed
    result = run_bimodal_benchmark(seed, args.n_pairs, model_config, train_config)
    out = _out_dir(args)
    report = dict(result.report)
    report.pop("wall_time_s")  # keeps the report byte-stable across runs
    _dump_json(out / "bimodal_report.json", report)
    M.save_checkpoint(out / "model", result.params, result.config)
    for name, ok in report["criteria"].items():
        print(f"{name}: {'pass' if ok else 'fail'}")


# ---------------------------------------------------------------------------
# parser


def _add_common(p, *, size=False, config=True):
    p.add_argument("--seed", type=int, default=None, help="random seed")
    p.add_argument("--out", required=True, help="output directory")
    if config:
        p.add_argument("--config", default=None, help="JSON config with model/train/gen sections")
    if size:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--desk", dest="size", action="store_const", const="desk", help="reduced model (default)")
        g.add_argument("--full", dest="size", action="store_const", const="full", help="full-size model")
        p.set_defaults(size="desk")


def _add_data(p, default_split="test"):
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--split", default=default_split, choices=("train", "val", "test"))
    p.add_argument("--stride", type=int, default=1, help="t0 stride when windowing unlabelled scenes")


def _add_forecaster(p):
    p.add_argument("--checkpoint", default=None, help="model checkpoint directory")
    p.add_argument("--baseline", choices=("cv",), default=None, help="use the constant-velocity baseline")
    p.add_argument("--q", type=float, default=None, help="CV process noise (skips tuning with --r)")
    p.add_argument("--r", type=float, default=None, help="CV measurement noise")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sammp", description="Multimodal joint trajectory forecasting experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic scenes and a manifest")
    _add_common(p)
    p.add_argument("--kind", choices=("highway", "bimodal", "following"), default="highway")
    p.add_argument("--n-scenes", type=int, default=20, help="scenes (pairs for bimodal)")
    p.add_argument("--fractions", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a manifest's train split")
    _add_common(p, size=True)
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics report for a model or the CV baseline")
    _add_common(p, config=False)
    _add_data(p)
    _add_forecaster(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--ego-only", dest="scope", action="store_const", const="ego")
    g.add_argument("--all-vehicles", dest="scope", action="store_const", const="all")
    p.set_defaults(scope="both", func=cmd_eval)

    p = sub.add_parser("forecast", help="mixture forecast of one window as JSON")
    _add_common(p, config=False)
    _add_data(p)
    _add_forecaster(p)
    p.add_argument("--window", type=int, default=0, help="window index within the split")
    p.add_argument("--heatmap", action="store_true", help="also write log10 density grid CSV")
    p.add_argument("--vehicle", type=int, default=None, help="heatmap vehicle row (default ego)")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("attention", help="attention matrices of one window as JSON")
    _add_common(p, config=False)
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--window", type=int, default=0)
    p.add_argument("--lane-width", type=float, default=3.5)
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("bench-bimodal", help="train and score the keep/change benchmark")
    _add_common(p, size=True)
    p.add_argument("--n-pairs", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_bench_bimodal)
    return parser


def _thread_limit():
    value = os.environ.get("SAMMP_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"SAMMP_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError("SAMMP_THREADS must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        if getattr(args, "n_pairs", 0) is None:
            from .bench import DEFAULT_PAIRS

            args.n_pairs = DEFAULT_PAIRS
        with _thread_limit():
            args.func(args)
    except (UsageError, ConfigError, ParseError) as exc:
        print(f"sammp: error: {exc}", file=sys.stderr)
        return 2
    except SammpError as exc:
        print(f"sammp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"sammp: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
