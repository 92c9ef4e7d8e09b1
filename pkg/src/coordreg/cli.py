"""Command-line interface: register, synth, eval, warp, report.

Exit codes: 0 success, 2 invalid arguments, 3 I/O failure, 4 numerical abort.
Diagnostics go to stderr; with ``--json`` stdout carries one JSON document.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import json
import os
import shutil
import sys
import tempfile
import typing
from pathlib import Path

import numpy as np

from . import checkpoint, metrics, report
from . import model as rm
from .data import (
    DataFormatError,
    LabelField,
    ScalarField,
    load_displacement_field,
    load_field,
    load_volume,
    normalize_intensity,
    save_displacement_field,
    save_image_2d,
    save_volume,
    warp_with_displacement,
)
from .optim import FULL_GRID, RunConfig, capacity_restricted_preset, register_pair
from .synth import GroundTruthWarp, RbfBump, generate_pair, rigid_level_warp

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
WORKERS_ENV = "COORDREG_WORKERS"


class UsageError(Exception):
    pass


class IOFailure(Exception):
    pass


def _err(msg: str) -> None:
    print(f"coordreg: {msg}", file=sys.stderr)


# --- run-config flags -----------------------------------------------------

_SKIP_FLAGS = {"granularity"}  # exposed as --mode


def _parse_steps(text: str):
    return text if text == FULL_GRID else int(text)


def _parse_widths(text: str):
    return tuple(int(t) for t in text.split(","))


def _flag_type(name: str, annotation):
    if name == "steps_per_epoch":
        return _parse_steps
    if name == "hidden_widths":
        return _parse_widths
    ann = str(annotation)
    if "bool" in ann:
        return bool
    if "float" in ann:
        return float
    if "int" in ann:
        return int
    return str


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run configuration (override --config)")
    defaults = RunConfig()
    hints = typing.get_type_hints(RunConfig)
    for f in dataclasses.fields(RunConfig):
        if f.name in _SKIP_FLAGS or f.name in ("modality", "seed"):
            continue
        default = getattr(defaults, f.name)
        shown = "auto" if default is None else default
        kind = _flag_type(f.name, hints[f.name])
        flag = "--" + f.name.replace("_", "-")
        if kind is bool:
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None,
                               help=f"(default: {shown})")
        else:
            group.add_argument(flag, dest=f.name, type=kind, default=None, help=f"(default: {shown})")


def _run_overrides(args) -> dict:
    out = {}
    for f in dataclasses.fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            out[f.name] = val
    if getattr(args, "mode", None):
        out["granularity"] = args.mode
    return out


_FILE_KEYS = {"fixed", "moving", "out_dir", "mode", "truth", "channel_fixed", "channel_moving",
              "capacity_restricted", "normalize"}


def _load_config_file(path) -> tuple[dict, dict]:
    """Split a JSON config into (run-config keys, I/O keys); unknown keys are an error."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    run_keys = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - run_keys - _FILE_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    run = {k: v for k, v in raw.items() if k in run_keys}
    if "mode" in raw:
        run["granularity"] = raw["mode"]
    if "hidden_widths" in run:
        run["hidden_widths"] = tuple(run["hidden_widths"])
    return run, {k: v for k, v in raw.items() if k in _FILE_KEYS}


# --- register -------------------------------------------------------------

def _read_scalar(path, channel: str) -> ScalarField:
    path = Path(path)
    if not path.exists():
        raise IOFailure(f"input not found: {path}")
    try:
        f = load_field(path, channel=channel)
    except DataFormatError as exc:
        raise IOFailure(str(exc)) from exc
    if isinstance(f, LabelField):
        f = ScalarField(f.values.astype(np.float64), f.spacing)
    return f


def _write_atomically(out_dir: Path, writer) -> None:
    """Run ``writer(tmp_dir)`` then move its files into ``out_dir``; nothing is left on failure."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".coordreg-", dir=out_dir.parent))
    try:
        writer(tmp)
        out_dir.mkdir(parents=True, exist_ok=True)
        for item in sorted(tmp.iterdir()):
            os.replace(item, out_dir / item.name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def write_loss_csv(path, history: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss_fixed_term", "loss_trans_term", "total"])
        for e, (a, b, c) in enumerate(history, start=1):
            w.writerow([e, repr(float(a)), repr(float(b)), repr(float(c))])


def read_loss_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["loss_fixed_term"]), float(r["loss_trans_term"]), float(r["total"])] for r in rows])


def run_registration(fixed_path, moving_path, out_dir, cfg: RunConfig, *, truth=None, channel_fixed="gray",
                     channel_moving="gray", capacity_restricted=False, normalize=True) -> dict:
    fixed = _read_scalar(fixed_path, channel_fixed)
    moving = _read_scalar(moving_path, channel_moving)
    if fixed.values.shape != moving.values.shape:
        raise UsageError(f"geometry mismatch: {fixed.values.shape} vs {moving.values.shape}")
    if normalize:
        fixed, moving = normalize_intensity(fixed), normalize_intensity(moving)
    if capacity_restricted:
        cfg = capacity_restricted_preset(cfg, max(fixed.values.shape))
    result = register_pair(fixed, moving, cfg)

    mag = np.linalg.norm(result.displacement, axis=-1)
    summary = {
        "fixed": str(fixed_path),
        "moving": str(moving_path),
        "final_loss": float(result.loss_history[-1, 2]),
        "final_loss_fixed_term": float(result.loss_history[-1, 0]),
        "final_loss_trans_term": float(result.loss_history[-1, 1]),
        "epochs_run": result.epochs_run,
        "runtime_s": result.wall_time,
        "median_displacement_px": float(np.median(mag)),
        "mean_displacement_px": float(np.mean(mag)),
        "config": result.config.to_dict(),
    }
    if truth is not None:
        warp = _read_truth(truth)
        if warp.dim == 2:
            delta = metrics.corner_relative_distance(
                metrics.field_transform(result.displacement), warp.apply, fixed.values.shape
            )
            summary["corner_relative_distance"] = delta
            summary["success"] = bool(delta < 2.0)

    def writer(tmp: Path):
        checkpoint.save(tmp / "checkpoint.bin", result.model)
        save_displacement_field(tmp / "displacement.bin", result.displacement)
        write_loss_csv(tmp / "loss.csv", result.loss_history)
        save_volume(tmp / "fixed.raw", fixed)
        save_volume(tmp / "transformed.raw", moving)
        (tmp / "summary.json").write_text(json.dumps(summary, indent=2))

    _write_atomically(Path(out_dir), writer)
    return summary


def _read_truth(path) -> GroundTruthWarp:
    try:
        return GroundTruthWarp.from_json(Path(path).read_text())
    except OSError as exc:
        raise IOFailure(f"cannot read ground truth {path}: {exc}") from exc
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid ground truth {path}: {exc}") from exc


def _pair_inputs(pair_dir: Path):
    for stem in ("fixed", "transformed"):
        if not any((pair_dir / f"{stem}{ext}").exists() for ext in (".png", ".raw")):
            raise IOFailure(f"{pair_dir} has no {stem}.png or {stem}.raw")
    pick = lambda stem: pair_dir / f"{stem}.png" if (pair_dir / f"{stem}.png").exists() else pair_dir / f"{stem}.raw"
    return pick("fixed"), pick("transformed")


def _register_one(job):
    pair_dir, out_dir, cfg_dict, opts = job
    fixed, moving = _pair_inputs(Path(pair_dir))
    truth = Path(pair_dir) / "truth.json"
    return run_registration(fixed, moving, out_dir, RunConfig.from_dict(cfg_dict),
                            truth=truth if truth.exists() else None, **opts)


def cmd_register(args) -> int:
    run, files = _load_config_file(args.config) if args.config else ({}, {})
    run.update(_run_overrides(args))
    if args.seed is not None:
        run["seed"] = args.seed
    if args.modality is not None:
        run["modality"] = args.modality
    try:
        cfg = RunConfig.from_dict(run)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    get = lambda name, default=None: getattr(args, name) if getattr(args, name) is not None else files.get(name, default)
    opts = dict(
        channel_fixed=get("channel_fixed", "gray"),
        channel_moving=get("channel_moving", "gray"),
        capacity_restricted=bool(get("capacity_restricted", False)),
        normalize=bool(get("normalize", True)),
    )
    out_dir = get("out_dir")
    if out_dir is None:
        raise UsageError("--out-dir is required")

    if args.batch:
        pairs = sorted(p for p in Path(args.batch).iterdir() if p.is_dir()) if Path(args.batch).is_dir() else None
        if not pairs:
            raise IOFailure(f"no pair directories under {args.batch}")
        jobs = [(p, Path(out_dir) / p.name, cfg.to_dict(), opts) for p in pairs]
        workers = max(1, int(os.environ.get(WORKERS_ENV, "1")))
        if workers == 1:
            summaries = [_register_one(j) for j in jobs]
        else:
            with concurrent.futures.ProcessPoolExecutor(workers) as pool:
                summaries = list(pool.map(_register_one, jobs))
        out = {"pairs": len(summaries), "summaries": summaries}
    else:
        fixed, moving = get("fixed"), get("moving")
        if fixed is None or moving is None:
            raise UsageError("--fixed and --moving are required (or use --batch)")
        out = run_registration(fixed, moving, out_dir, cfg, truth=get("truth"), **opts)
    _emit(args, out)
    return EXIT_OK


# --- synth ----------------------------------------------------------------

def _parse_rbf(text: str, extents) -> GroundTruthWarp:
    p = Path(text)
    try:
        spec = json.loads(p.read_text() if p.exists() else text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"--rbf is neither a file nor JSON: {exc}") from exc
    bumps = spec["bumps"] if isinstance(spec, dict) else spec
    try:
        return GroundTruthWarp("rbf", extents, bumps=[RbfBump(**b) for b in bumps])
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid --rbf spec: {exc}") from exc


def cmd_synth(args) -> int:
    size = args.size
    extents = tuple(size) if len(size) > 1 else (size[0],) * args.dim
    if len(extents) != args.dim:
        raise UsageError("--size must give one value or one per dimension")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    out = Path(args.out_dir)
    written = []
    for k in range(args.count):
        seed = args.seed + k
        if args.level is not None:
            warp = rigid_level_warp(args.level, extents, seed)
        elif args.rbf is not None:
            warp = _parse_rbf(args.rbf, extents)
        else:
            warp = GroundTruthWarp.identity(extents)
        pair = generate_pair(warp, seed, args.modality, args.noise, args.labels)
        pdir = out / f"pair_{k:03d}"
        pdir.mkdir(parents=True, exist_ok=True)
        if args.dim == 2:
            save_image_2d(pdir / "fixed.png", pair.fixed)
            save_image_2d(pdir / "transformed.png", pair.transformed)
        else:
            save_volume(pdir / "fixed.raw", pair.fixed)
            save_volume(pdir / "transformed.raw", pair.transformed)
        if pair.fixed_labels is not None:
            save_volume(pdir / "labels_fixed.raw", pair.fixed_labels)
            save_volume(pdir / "labels_transformed.raw", pair.transformed_labels)
        (pdir / "truth.json").write_text(warp.to_json())
        written.append(str(pdir))
    _emit(args, {"pairs": written})
    return EXIT_OK


# --- eval -----------------------------------------------------------------

def _pair_dirs(root: Path, marker: str) -> dict:
    if not root.is_dir():
        raise IOFailure(f"not a directory: {root}")
    return {p.name: p for p in sorted(root.iterdir()) if (p / marker).exists()}


def evaluate(results_dir, truth_dir, protocol: str = "corner", threshold: float = 2.0) -> metrics.EvalReport:
    results = _pair_dirs(Path(results_dir), "displacement.bin")
    truths = _pair_dirs(Path(truth_dir), "truth.json")
    if len(results) != len(truths) or set(results) != set(truths):
        raise UsageError(f"pair mismatch: {len(results)} results vs {len(truths)} truths")
    if not truths:
        raise UsageError("no pairs to evaluate")
    rep = metrics.EvalReport(threshold=threshold if protocol == "corner" else None)
    for name in sorted(truths):
        disp = load_displacement_field(results[name] / "displacement.bin").values
        if protocol == "corner":
            warp = _read_truth(truths[name] / "truth.json")
            delta = metrics.corner_relative_distance(metrics.field_transform(disp), warp.apply, disp.shape[:-1])
            rep.add(pair=name, relative_distance=delta, success=int(delta < threshold))
        else:
            try:
                fixed_labels = load_volume(truths[name] / "labels_fixed.raw", kind="label")
                ref_labels = load_volume(truths[name] / "labels_transformed.raw", kind="label")
            except DataFormatError as exc:
                raise IOFailure(str(exc)) from exc
            warped = warp_with_displacement(fixed_labels, disp, "nearest")
            m = metrics.label_metrics(warped, ref_labels)
            row = {"pair": name, "dice": m["mean_dice"], "weighted_dice": m["weighted_dice"], "hd95": m["mean_hd95"]}
            for lab, v in m["labels"].items():
                row[f"dice_{lab}"] = v["dice"]
                row[f"hd95_{lab}"] = v["hd95"]
            rep.add(**row)
    return rep


def cmd_eval(args) -> int:
    rep = evaluate(args.results_dir, args.truth_dir, args.protocol, args.threshold)
    out = Path(args.out or args.results_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep.write(out / f"eval_{args.protocol}.csv", out / f"eval_{args.protocol}.json")
    _emit(args, rep.aggregate())
    return EXIT_OK


# --- warp -----------------------------------------------------------------

def _read_any(path, kind):
    path = Path(path)
    if not path.exists():
        raise IOFailure(f"input not found: {path}")
    try:
        return load_field(path, kind=kind)
    except DataFormatError as exc:
        raise IOFailure(str(exc)) from exc


def _write_field(path, field) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() in (".png", ".pgm"):
        if isinstance(field, LabelField):
            from PIL import Image

            Image.fromarray(field.values.astype(np.uint16 if field.values.max() > 255 else np.uint8)).save(path)
        else:
            save_image_2d(path, field)
    else:
        save_volume(path, field)


def cmd_warp(args) -> int:
    if (args.field is None) == (args.checkpoint is None):
        raise UsageError("give exactly one of --field or --checkpoint")
    kind = args.kind
    field = _read_any(args.input, kind)
    if isinstance(field, LabelField) and args.interp == "linear":
        raise UsageError("linear interpolation is not allowed for label fields")
    try:
        if args.checkpoint:
            model = checkpoint.load(args.checkpoint)
            warped = rm.warp_field(field, model, args.interp)
        else:
            disp = load_displacement_field(args.field)
            warped = warp_with_displacement(field, disp, args.interp)
    except (checkpoint.CheckpointError, DataFormatError) as exc:
        raise IOFailure(str(exc)) from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _write_field(args.out, warped)
    _emit(args, {"out": str(args.out)})
    return EXIT_OK


# --- report ---------------------------------------------------------------

def cmd_report(args) -> int:
    run = Path(args.run_dir)
    needed = ["checkpoint.bin", "loss.csv", "transformed.raw"]
    missing = [n for n in needed if not (run / n).exists()]
    if missing:
        raise IOFailure(f"{run} is missing {', '.join(missing)}")
    try:
        model = checkpoint.load(run / "checkpoint.bin")
        losses = read_loss_csv(run / "loss.csv")
        transformed = load_volume(run / "transformed.raw").values
    except (checkpoint.CheckpointError, DataFormatError) as exc:
        raise IOFailure(str(exc)) from exc
    paths = report.write_report(run, Path(args.out or run), losses[:, 2], model, transformed)
    _emit(args, paths)
    return EXIT_OK


# --- plumbing -------------------------------------------------------------

def _emit(args, payload) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2, default=str))
    else:
        for k, v in payload.items() if isinstance(payload, dict) else []:
            if not isinstance(v, (dict, list)):
                print(f"{k}: {v}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coordreg", description="Pairwise image registration with per-pair coordinate networks.")
    p.add_argument("--json", action="store_true", help="print a machine-readable summary on stdout")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("register", help="register one pair (or a batch directory)")
    r.add_argument("--fixed", help="fixed (reference) image or volume")
    r.add_argument("--moving", help="transformed (moving) image or volume")
    r.add_argument("--mode", choices=["rigid", "deformable"], help="motion granularity (default: deformable)")
    r.add_argument("--modality", choices=["single", "multi"], help="single or multi-modal (default: single)")
    r.add_argument("--config", help="JSON config; flags override its values")
    r.add_argument("--out-dir", help="output directory")
    r.add_argument("--seed", type=int, help="random seed (default: 0)")
    r.add_argument("--truth", help="ground-truth warp JSON; adds the corner distance to the summary")
    r.add_argument("--channel-fixed", choices=["gray", "r", "g", "b", "luma"], help="channel of the fixed image (default: gray)")
    r.add_argument("--channel-moving", choices=["gray", "r", "g", "b", "luma"], help="channel of the moving image (default: gray)")
    r.add_argument("--capacity-restricted", action="store_true", default=None,
                   help="limit the image grid to 1/15 of the image resolution")
    r.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=None,
                   help="percentile-normalize intensities (default: on)")
    r.add_argument("--batch", help=f"directory of pair_* subdirectories; workers from ${WORKERS_ENV}")
    _add_run_flags(r)
    r.set_defaults(func=cmd_register)

    s = sub.add_parser("synth", help="generate synthetic pairs with ground truth")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--level", type=int, choices=[1, 2, 3, 4], help="rigid motion level")
    g.add_argument("--rbf", help="JSON (or file) with a list of bumps {center, amplitude, bandwidth}")
    s.add_argument("--modality", choices=["same", "remap"], default="same", help="(default: same)")
    s.add_argument("--seed", type=int, default=0, help="(default: 0)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--count", type=int, default=1, help="(default: 1)")
    s.add_argument("--size", type=int, nargs="+", default=[64], help="extent(s) (default: 64)")
    s.add_argument("--dim", type=int, choices=[2, 3], default=2, help="(default: 2)")
    s.add_argument("--noise", type=float, default=0.0, help="Gaussian noise std (default: 0)")
    s.add_argument("--labels", type=int, default=0, help="number of ellipsoid labels (default: 0)")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="score registration results against ground truth")
    e.add_argument("--results-dir", required=True)
    e.add_argument("--truth-dir", required=True)
    e.add_argument("--protocol", choices=["corner", "labels"], default="corner", help="(default: corner)")
    e.add_argument("--threshold", type=float, default=2.0, help="success threshold in percent (default: 2.0)")
    e.add_argument("--out", help="output directory (default: results dir)")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("warp", help="warp an image, volume or label map")
    w.add_argument("--field", help="displacement field file")
    w.add_argument("--checkpoint", help="model checkpoint")
    w.add_argument("--input", required=True)
    w.add_argument("--interp", choices=["linear", "nearest"], default="linear", help="(default: linear)")
    w.add_argument("--kind", choices=["scalar", "label"], help="override input kind (default: from file)")
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_warp)

    rp = sub.add_parser("report", help="loss curve and overlays for a run directory")
    rp.add_argument("--run-dir", required=True)
    rp.add_argument("--out", help="output directory (default: run dir)")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_ARGS
    except (IOFailure, OSError) as exc:
        _err(str(exc))
        return EXIT_IO
    except rm.NumericalAbort as exc:
        _err(f"numerical abort: {exc} (epoch {exc.epoch}, step {exc.step})")
        return EXIT_NUMERIC
    except ValueError as exc:
        _err(str(exc))
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
