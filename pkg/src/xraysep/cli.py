"""Command-line entry point: ``xraysep {mix,train,separate,sweep,baseline,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import engine
from .checkpoint import CheckpointError, config_to_dict, load_checkpoint, save_checkpoint
from .engine import SNAPSHOT_EPOCHS, TrainConfig, TrainingAborted
from .gradcheck import run_gradcheck, OPS
from .images import ImageError, read_gray, read_rgb, write_png16
from .losses import LossBreakdown, LossWeights
from .model import BaselineWeights
from .pipeline import OVERLAP, PATCH_SIZE, TripleDataset, mix_images
from .synthetic import KINDS, SyntheticSpec, make_pair
from .tensor import NonFiniteError

logger = logging.getLogger("xraysep")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LAMBDA_DEFAULTS = LossWeights().as_tuple()
IMAGE_KEYS = ("r1", "r2", "x", "x1", "x2")


class DataError(Exception):
    """Bad manifest, unreadable input or inconsistent data."""


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--manifest", type=Path, help="JSON dataset manifest")
    g.add_argument("--out", type=Path, help="run directory (created if missing)")
    g.add_argument("--seed", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    for i in range(1, 5):
        g.add_argument(f"--lambda{i}", type=_floats, metavar="V[,V...]",
                       help="loss weight; comma-separated list for sweep")
    g.add_argument("--patch-size", type=int)
    g.add_argument("--overlap", type=int)
    g.add_argument("--trials", type=int, help="trials per grid point (sweep) or per op (gradcheck)")
    g.add_argument("--raw-norm", action="store_true", default=None,
                   help="report unnormalized Frobenius errors instead of per-pixel RMS")
    g.add_argument("--width", type=int, help="feature channels of the connected auto-encoders")
    g.add_argument("--jobs", type=int, default=1, help="parallel trials (sweep)")
    g.add_argument("--snapshot-epochs", type=_ints, metavar="E[,E...]")

    p = UsageParser(prog="xraysep", description="Separate mixed X-rays of double-sided paintings.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    m = sub.add_parser("mix", parents=[common], help="mix two X-rays or generate a synthetic pair")
    m.add_argument("--x1", type=Path, help="side-1 grayscale X-ray")
    m.add_argument("--x2", type=Path, help="side-2 grayscale X-ray")
    m.add_argument("--synthetic", choices=KINDS, help="generate a seeded synthetic pair instead")
    m.add_argument("--size", type=int, default=128)
    m.add_argument("--grain", type=float, default=0.0)
    m.add_argument("--cracks", type=float, default=0.0)

    t = sub.add_parser("train", parents=[common], help="train on one image triple and separate it")
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")

    s = sub.add_parser("separate", parents=[common], help="separate with a trained checkpoint")
    s.add_argument("--checkpoint", type=Path, required=True)

    sub.add_parser("sweep", parents=[common], help="grid search over the loss weights")
    sub.add_parser("baseline", parents=[common], help="train and apply the single-network baseline")

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    gc.add_argument("--corrupt", choices=OPS + ("loss_total",), metavar="OP",
                    help="negative control: perturb the backward pass of OP")
    return p


# ---------------------------------------------------------------- config

@dataclass
class RunConfig:
    command: str
    out: Path | None
    train: TrainConfig
    patch_size: int
    overlap: int
    trials: int
    raw_norm: bool
    images: dict[str, Path]
    truth_factor: float
    grid: list[LossWeights]


def _load_manifest(path: Path | None) -> tuple[dict, Path]:
    if path is None:
        return {}, Path.cwd()
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise DataError(f"manifest {path} must hold a JSON object")
    return data, path.resolve().parent


def _pick(flag, manifest: dict, key: str, default):
    if flag is not None:
        return flag
    return manifest.get(key, default)


def resolve_config(args) -> RunConfig:
    """Merge flags over manifest fields over defaults; check every input path up front."""
    man, base = _load_manifest(args.manifest)
    images = {}
    for k in IMAGE_KEYS:
        if k in man:
            p = Path(man[k])
            p = p if p.is_absolute() else base / p
            if not p.is_file():
                raise DataError(f"manifest entry {k!r}: no such file {p}")
            images[k] = p

    lambdas = []
    for i in range(1, 5):
        v = getattr(args, f"lambda{i}")
        if v is None:
            v = man.get(f"lambda{i}", LAMBDA_DEFAULTS[i - 1])
        lambdas.append(list(v) if isinstance(v, (list, tuple)) else [float(v)])
    try:
        grid = engine.lambda_grid(*lambdas)
        cfg = TrainConfig(
            weights=grid[0],
            lr=float(_pick(args.lr, man, "lr", engine.DEFAULT_LR)),
            epochs=int(_pick(args.epochs, man, "epochs", 200)),
            batch_size=int(_pick(args.batch_size, man, "batch_size", engine.BATCH_SIZE)),
            seed=int(_pick(args.seed, man, "seed", 0)),
            snapshot_epochs=tuple(_pick(args.snapshot_epochs, man, "snapshot_epochs", SNAPSHOT_EPOCHS)),
            width=int(_pick(args.width, man, "width", engine.WIDTH)),
            joint_bn=bool(man.get("joint_bn", False)),
        )
        if not grid:
            raise ValueError("empty loss-weight grid")
    except ValueError as exc:
        raise DataError(str(exc)) from None
    trials = int(_pick(args.trials, man, "trials", 1))
    if trials < 1:
        raise DataError("trials must be >= 1")
    return RunConfig(
        command=args.command, out=args.out, train=cfg,
        patch_size=int(_pick(args.patch_size, man, "patch_size", PATCH_SIZE)),
        overlap=int(_pick(args.overlap, man, "overlap", OVERLAP)),
        trials=trials, raw_norm=bool(_pick(args.raw_norm, man, "raw_norm", False)),
        images=images, truth_factor=float(man.get("truth_factor", 1.0)), grid=grid,
    )


@dataclass
class Inputs:
    r1: np.ndarray
    r2: np.ndarray
    x: np.ndarray
    truth: tuple[np.ndarray, np.ndarray] | None


def load_inputs(rc: RunConfig) -> Inputs:
    missing = [k for k in ("r1", "r2", "x") if k not in rc.images]
    if missing:
        raise DataError(f"manifest lacks required images: {', '.join(missing)}")
    try:
        r1, r2 = read_rgb(rc.images["r1"]), read_rgb(rc.images["r2"])
        x = read_gray(rc.images["x"])
        truth = None
        if "x1" in rc.images and "x2" in rc.images:
            truth = (read_gray(rc.images["x1"]) * rc.truth_factor,
                     read_gray(rc.images["x2"]) * rc.truth_factor)
    except ImageError as exc:
        raise DataError(str(exc)) from None
    shapes = {r1.shape[1:], r2.shape[1:], x.shape[1:]}
    if truth is not None:
        shapes |= {truth[0].shape[1:], truth[1].shape[1:]}
    if len(shapes) != 1:
        raise DataError(f"input images differ in size: {sorted(shapes)}")
    return Inputs(r1, r2, x, truth)


def _require_out(rc: RunConfig) -> Path:
    if rc.out is None:
        raise DataError("--out is required for this command")
    rc.out.mkdir(parents=True, exist_ok=True)
    return rc.out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_losses(path: Path, history: list[LossBreakdown], fields=LossBreakdown.FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch",) + tuple(fields))
        for e, b in enumerate(history, 1):
            w.writerow([e] + [repr(getattr(b, k)) for k in fields])


def _run_settings(rc: RunConfig) -> dict:
    return {"train": config_to_dict(rc.train), "patch_size": rc.patch_size, "overlap": rc.overlap,
            "raw_norm": rc.raw_norm, "images": {k: str(v) for k, v in sorted(rc.images.items())}}


def _rms(a: np.ndarray, raw: bool) -> float:
    n = float(np.linalg.norm(np.ravel(a)))
    return n if raw else n / np.sqrt(a.size)


def _emit_result(out: Path, res: engine.SeparationResult, inp: Inputs, raw_norm: bool) -> dict:
    write_png16(out / "x1hat.png", res.x1_hat)
    write_png16(out / "x2hat.png", res.x2_hat)
    write_png16(out / "xbar.png", res.x_bar)
    write_png16(out / "error_map.png", res.error_map)
    if res.r1_hat is not None:
        write_png16(out / "r1hat.png", res.r1_hat)
        write_png16(out / "r2hat.png", res.r2_hat)
    oc = engine.classify_outcome(res.x1_hat, res.x2_hat, inp.x)
    summary = {
        "recombination_error": _rms(inp.x - res.x_bar, raw_norm),
        "outcome": {"case": oc.case.value, "energy_ratio": oc.energy_ratio,
                    "correlation": oc.correlation},
    }
    if inp.truth is not None:
        summary["mse"] = engine.mse_eval([(res.x1_hat, res.x2_hat)], inp.truth, raw_norm)
    return summary


# ---------------------------------------------------------------- commands

def cmd_mix(args, rc: RunConfig) -> int:
    out = _require_out(rc)
    if args.synthetic:
        if args.x1 or args.x2:
            raise DataError("--synthetic cannot be combined with --x1/--x2")
        spec = SyntheticSpec(args.synthetic, rc.train.seed, args.size, args.grain, args.cracks)
        try:
            pair = make_pair(spec)
        except ValueError as exc:
            raise DataError(str(exc)) from None
        for name, img in (("r1", pair.r1), ("r2", pair.r2),
                          ("x1", pair.x1 / pair.factor), ("x2", pair.x2 / pair.factor), ("x", pair.x)):
            write_png16(out / f"{name}.png", img)
        factor = pair.factor
        sources = {"synthetic": args.synthetic, "seed": rc.train.seed, "size": args.size,
                   "grain": args.grain, "cracks": args.cracks}
        _write_json(out / "manifest.json", {"r1": "r1.png", "r2": "r2.png", "x": "x.png",
                                            "x1": "x1.png", "x2": "x2.png", "truth_factor": factor})
    else:
        if not (args.x1 and args.x2):
            raise DataError("mix needs --x1 and --x2, or --synthetic")
        try:
            x1, x2 = read_gray(args.x1), read_gray(args.x2)
            mixed, factor = mix_images(x1, x2)
        except (ImageError, ValueError) as exc:
            raise DataError(str(exc)) from None
        write_png16(out / "x.png", mixed)
        for name, src in (("x1", args.x1), ("x2", args.x2)):
            dst = out / f"{name}{src.suffix}"
            if src.resolve() != dst.resolve():
                shutil.copyfile(src, dst)
        sources = {"x1": str(args.x1), "x2": str(args.x2)}
    _write_json(out / "x.json", {"factor": factor, "rescaled": factor != 1.0, "sources": sources})
    print(f"mixed X-ray written to {out / 'x.png'} (factor {factor:.6g})")
    return EXIT_OK


def cmd_train(args, rc: RunConfig) -> int:
    out = _require_out(rc)
    inp = load_inputs(rc)
    cfg = rc.train
    state = None
    if args.resume is not None:
        try:
            state, saved = load_checkpoint(args.resume)
        except CheckpointError as exc:
            raise DataError(str(exc)) from None
        if isinstance(state.weights, BaselineWeights):
            raise DataError("cannot resume a baseline checkpoint with train")
        cfg = replace(saved, epochs=cfg.epochs if args.epochs is not None else saved.epochs)
    _write_json(out / "config.json", _run_settings(replace(rc, train=cfg)))
    try:
        data = TripleDataset.from_images(inp.r1, inp.r2, inp.x, rc.patch_size, rc.overlap)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    snaps = out / "snapshots"

    def on_epoch(st):
        _write_losses(out / "loss.csv", st.history)
        if st.epoch in cfg.snapshot_epochs:
            save_checkpoint(out / "checkpoints" / f"epoch_{st.epoch}.ckpt", st, cfg)
            res = engine.separate(st.weights, inp.r1, inp.r2, inp.x, rc.patch_size, rc.overlap)
            for key, img in (("r1hat", res.r1_hat), ("r2hat", res.r2_hat),
                             ("x1hat", res.x1_hat), ("x2hat", res.x2_hat)):
                write_png16(snaps / f"epoch_{st.epoch}_{key}.png", img)
        logger.info("epoch %d/%d total %.6g", st.epoch, cfg.epochs, st.history[-1].total)

    state = engine.train(data, cfg, state=state, on_epoch=on_epoch)
    _write_losses(out / "loss.csv", state.history)
    save_checkpoint(out / "checkpoints" / "final.ckpt", state, cfg)
    res = engine.separate(state.weights, inp.r1, inp.r2, inp.x, rc.patch_size, rc.overlap)
    summary = _emit_result(out, res, inp, rc.raw_norm)
    summary.update(epochs=state.epoch, final_loss=state.history[-1].as_dict())
    _write_json(out / "summary.json", summary)
    _print_summary(summary)
    return EXIT_OK


def cmd_separate(args, rc: RunConfig) -> int:
    out = _require_out(rc)
    inp = load_inputs(rc)
    try:
        state, _ = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise DataError(str(exc)) from None
    fn = engine.separate_baseline if isinstance(state.weights, BaselineWeights) else engine.separate
    try:
        res = fn(state.weights, inp.r1, inp.r2, inp.x, rc.patch_size, rc.overlap)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    summary = _emit_result(out, res, inp, rc.raw_norm)
    summary["checkpoint_epoch"] = state.epoch
    _write_json(out / "summary.json", summary)
    _print_summary(summary)
    return EXIT_OK


def cmd_baseline(args, rc: RunConfig) -> int:
    out = _require_out(rc)
    inp = load_inputs(rc)
    cfg = rc.train
    _write_json(out / "config.json", _run_settings(rc))
    try:
        data = TripleDataset.from_images(inp.r1, inp.r2, inp.x, rc.patch_size, rc.overlap)
    except ValueError as exc:
        raise DataError(str(exc)) from None

    def on_epoch(st):
        _write_losses(out / "loss.csv", st.history, ("total",))

    state = engine.train_baseline(data, cfg, on_epoch=on_epoch)
    save_checkpoint(out / "checkpoints" / "final.ckpt", state, cfg)
    res = engine.separate_baseline(state.weights, inp.r1, inp.r2, inp.x, rc.patch_size, rc.overlap)
    summary = _emit_result(out, res, inp, rc.raw_norm)
    summary.update(epochs=state.epoch, final_loss=state.history[-1].total)
    _write_json(out / "summary.json", summary)
    _print_summary(summary)
    return EXIT_OK


SWEEP_COLUMNS = ("lambda1", "lambda2", "lambda3", "lambda4", "R", "mean_mse",
                 "case_I", "case_II", "case_III")


def _fmt(v) -> str:
    return "" if v is None else repr(v)


def write_sweep(out: Path, report: engine.SweepReport, raw_norm: bool) -> None:
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for e in report.entries:
            f = e.frequencies()
            w.writerow([repr(v) for v in e.weights.as_tuple()]
                       + [e.R, _fmt(e.mean_mse), repr(f["I"]), repr(f["II"]), repr(f["III"])])
    with open(out / "trials.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("lambda1", "lambda2", "lambda3", "lambda4", "seed", "case", "energy_ratio",
                    "correlation", "mse", "recombination_error"))
        for e in report.entries:
            for t in e.trials:
                w.writerow([repr(v) for v in e.weights.as_tuple()]
                           + [t.seed, t.outcome.case.value, repr(t.outcome.energy_ratio),
                              repr(t.outcome.correlation), _fmt(t.mse), repr(t.recombination_error)])
    _write_mse_matrix(out / "mse_matrix.csv", report)
    summary = {"grid_points": len(report.entries), "R": report.entries[0].R, "raw_norm": raw_norm}
    try:
        best = engine.best_entry(report)
        summary["best"] = {"lambda": list(best.weights.as_tuple()), "mean_mse": best.mean_mse,
                           "frequencies": best.frequencies()}
    except ValueError:
        summary["best"] = None
    _write_json(out / "summary.json", summary)


def _write_mse_matrix(path: Path, report: engine.SweepReport) -> None:
    """MSE surface over the (up to two) lambdas that vary across the grid."""
    pts = [(e.weights.as_tuple(), e.mean_mse) for e in report.entries]
    axes = [i for i in range(4) if len({p[0][i] for p in pts}) > 1]
    if len(axes) > 2:
        logger.warning("grid varies more than two weights; MSE matrix skipped")
        return
    rows_ax = axes[0] if axes else None
    cols_ax = axes[1] if len(axes) > 1 else None
    rows = sorted({p[0][rows_ax] for p in pts}) if rows_ax is not None else [None]
    cols = sorted({p[0][cols_ax] for p in pts}) if cols_ax is not None else [None]
    val = {(w[rows_ax] if rows_ax is not None else None,
            w[cols_ax] if cols_ax is not None else None): m for w, m in pts}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        rname = f"lambda{rows_ax + 1}" if rows_ax is not None else ""
        cname = f"lambda{cols_ax + 1}" if cols_ax is not None else "mean_mse"
        w.writerow([f"{rname}\\{cname}"] + [repr(c) if c is not None else "mean_mse" for c in cols])
        for r in rows:
            w.writerow([repr(r) if r is not None else ""] + [_fmt(val.get((r, c))) for c in cols])


def cmd_sweep(args, rc: RunConfig) -> int:
    out = _require_out(rc)
    inp = load_inputs(rc)
    _write_json(out / "config.json", dict(_run_settings(rc), trials=rc.trials,
                                          grid=[list(w.as_tuple()) for w in rc.grid]))
    try:
        report = engine.sweep(inp.r1, inp.r2, inp.x, rc.train, rc.grid, rc.trials, rc.patch_size,
                              rc.overlap, inp.truth, rc.raw_norm, n_jobs=args.jobs)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    write_sweep(out, report, rc.raw_norm)
    for e in report.entries:
        f = e.frequencies()
        mse = "n/a" if e.mean_mse is None else f"{e.mean_mse:.6g}"
        print(f"lambda={e.weights.as_tuple()} R={e.R} mse={mse} "
              f"I={f['I']:.3f} II={f['II']:.3f} III={f['III']:.3f}")
    return EXIT_OK


def cmd_gradcheck(args, rc: RunConfig) -> int:
    trials = args.trials if args.trials is not None else 10
    results = run_gradcheck(seed=rc.train.seed, trials=trials, corrupt=args.corrupt)
    width = max(len(r.op) for r in results)
    print(f"{'op':<{width}}  {'rel_error':>10}  {'tol':>7}  status")
    for r in results:
        print(f"{r.op:<{width}}  {r.rel_error:10.3e}  {r.tol:7.0e}  {'PASS' if r.passed else 'FAIL'}")
    if rc.out is not None:
        rc.out.mkdir(parents=True, exist_ok=True)
        with open(rc.out / "gradcheck.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("op", "rel_error", "tol", "passed"))
            for r in results:
                w.writerow((r.op, repr(r.rel_error), repr(r.tol), r.passed))
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _print_summary(summary: dict) -> None:
    parts = [f"{k}={v:.6g}" for k, v in sorted(summary.items()) if isinstance(v, float)]
    parts.append(f"case={summary['outcome']['case']}")
    print(" ".join(parts))


COMMANDS = {"mix": cmd_mix, "train": cmd_train, "separate": cmd_separate, "sweep": cmd_sweep,
            "baseline": cmd_baseline, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve_config(args)
        return COMMANDS[args.command](args, rc)
    except DataError as exc:
        print(f"xraysep: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAborted, NonFiniteError) as exc:
        print(f"xraysep: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
