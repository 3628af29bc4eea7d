"""Command-line front end.

One process per command, everything deterministic under a fixed seed.
Training artifacts land in a run directory named by the hash of the
resolved configuration plus the seed, so replays land in the same place
and identical configs are easy to spot.

Exit codes are a stable contract: 0 success, 2 usage, 3 bad inputs or
preconditions, 4 numerical failure at runtime.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import compression, plots, rng as rng_mod
from .bptt import forward_batch, init_softmax_head, predict
from .data import (
    DataError,
    NormStats,
    SYNTH_KINDS,
    compute_norm_stats,
    load_csv_dataset,
    normalize,
    save_csv_dataset,
    synth_task,
    train_val_split,
)
from .diagnostics import (
    alpha_beta_study,
    conditioning_report,
    default_recall_trainer,
    gradient_norm_spectrum,
    reports_to_text,
    spectrum_ratio,
)
from .linalg import spectral_norm
from .modelfile import (
    KIND_CHECKPOINT,
    ModelFileError,
    load_checkpoint,
    load_quantized,
    peek_kind,
    save_checkpoint,
    save_quantized,
    size_breakdown,
)
from .quantize import integer_forward, quantize_input, quantize_model
from .training import (
    ARCHS,
    ArchConfig,
    OPTIMIZERS,
    TrainConfig,
    build_cell,
    evaluate,
    train_full,
    write_history_tsv,
)
from .compression import SparsityPlan


class UsageError(Exception):
    """Bad invocation detected after argument parsing (exit 2)."""


# ---------------------------------------------------------------------------
# Train configuration resolution.
#
# Flags parse with SUPPRESS defaults so the namespace carries only what the
# user typed. Resolution order is: built-in defaults, then the --config file,
# then explicit flags. Unknown config keys are rejected rather than ignored.

TRAIN_DEFAULTS: dict = {
    "data": None,
    "test": None,
    "T": None,
    "D": None,
    "classes": None,
    "val_frac": 0.2,
    "raw": False,
    "arch": "fastgrnn",
    "nonlin": "tanh",
    "gate_nonlin": "sigmoid",
    "hidden": 32,
    "rw": 0,
    "ru": 0,
    "sw": 1.0,
    "su": 1.0,
    "e1": 100,
    "e2": 100,
    "e3": 100,
    "lr": 0.01,
    "optimizer": "momentum",
    "batch": 100,
    "seed": 42,
    "proj_period": 20,
    "patience": 25,
    "metric": "accuracy",
    "out": "out",
}


def _add_train_flags(sub: argparse.ArgumentParser) -> None:
    d = TRAIN_DEFAULTS
    S = argparse.SUPPRESS
    sub.add_argument("data", nargs="?", default=S, help="training CSV (T*D feature cells then the label)")
    sub.add_argument("--test", default=S, help="optional test CSV, evaluated with the best model")
    sub.add_argument("--T", type=int, default=S, help="sequence length of the CSV rows")
    sub.add_argument("--D", type=int, default=S, help="features per timestep")
    sub.add_argument("--classes", type=int, default=S, help="label count (default: inferred)")
    sub.add_argument("--val-frac", type=float, default=S, help=f"validation fraction (default {d['val_frac']})")
    sub.add_argument("--raw", action="store_true", default=S, help="skip z-score normalization")
    sub.add_argument("--arch", choices=ARCHS, default=S, help=f"default {d['arch']}")
    sub.add_argument("--nonlin", default=S, help=f"update nonlinearity (default {d['nonlin']})")
    sub.add_argument("--gate-nonlin", default=S, help=f"gate nonlinearity (default {d['gate_nonlin']})")
    sub.add_argument("--hidden", type=int, default=S, help=f"hidden units (default {d['hidden']})")
    sub.add_argument("--rw", type=int, default=S, help="rank of W (0 = full)")
    sub.add_argument("--ru", type=int, default=S, help="rank of U (0 = full)")
    sub.add_argument("--sw", type=float, default=S, help="sparsity budget for W factors (1.0 = dense)")
    sub.add_argument("--su", type=float, default=S, help="sparsity budget for U factors (1.0 = dense)")
    sub.add_argument("--e1", type=int, default=S, help=f"dense-stage epochs (default {d['e1']})")
    sub.add_argument("--e2", type=int, default=S, help=f"sparsifying-stage epochs (default {d['e2']})")
    sub.add_argument("--e3", type=int, default=S, help=f"frozen-support epochs (default {d['e3']})")
    sub.add_argument("--lr", type=float, default=S, help=f"learning rate (default {d['lr']})")
    sub.add_argument("--optimizer", choices=OPTIMIZERS, default=S, help=f"default {d['optimizer']}")
    sub.add_argument("--batch", type=int, default=S, help=f"batch size (default {d['batch']})")
    sub.add_argument("--seed", type=int, default=S, help=f"default {d['seed']}")
    sub.add_argument("--proj-period", type=int, default=S, help=f"steps between projections (default {d['proj_period']})")
    sub.add_argument("--patience", type=int, default=S, help=f"early-stop patience (default {d['patience']})")
    sub.add_argument("--metric", choices=("accuracy", "f1"), default=S, help=f"default {d['metric']}")
    sub.add_argument("--out", default=S, help=f"parent of the run directory (default {d['out']})")
    sub.add_argument("--config", default=S, help="JSON config file; explicit flags win")


def _resolve_train_config(args: argparse.Namespace) -> dict:
    given = {k: v for k, v in vars(args).items() if k not in ("func", "config", "command")}
    resolved = dict(TRAIN_DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path is not None:
        with open(config_path, "r", encoding="ascii") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise UsageError(f"{config_path}: config must be a JSON object")
        unknown = sorted(set(loaded) - set(TRAIN_DEFAULTS))
        if unknown:
            raise UsageError(f"{config_path}: unknown config keys {unknown}")
        resolved.update(loaded)
    resolved.update(given)
    if resolved["data"] is None:
        raise UsageError("missing dataset path (positional argument or config key 'data')")
    if resolved["T"] is None or resolved["D"] is None:
        raise UsageError("--T and --D are required to parse the dataset CSV")
    return resolved


def _run_dir(cfg: dict) -> str:
    # The output parent is plumbing, not part of the experiment identity.
    hashed = {k: v for k, v in cfg.items() if k != "out"}
    digest = hashlib.sha256(json.dumps(hashed, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
    return os.path.join(cfg["out"], f"{digest[:8]}-seed{cfg['seed']}")


def _identity_stats(d: int) -> NormStats:
    return NormStats(mean=np.zeros(d), std=np.ones(d))


def _load_split(cfg: dict):
    full = load_csv_dataset(cfg["data"], T=cfg["T"], D=cfg["D"], n_classes=cfg["classes"])
    train_ds, val_ds = train_val_split(full, val_fraction=cfg["val_frac"], seed=cfg["seed"])
    if cfg["raw"]:
        stats = _identity_stats(cfg["D"])
    else:
        stats = compute_norm_stats(train_ds)
        train_ds = normalize(train_ds, stats)
        val_ds = normalize(val_ds, stats)
    return train_ds, val_ds, stats


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_train_config(args)
    arch_cfg = ArchConfig(
        arch=cfg["arch"],
        d_hidden=cfg["hidden"],
        nonlin=cfg["nonlin"],
        gate_nonlin=cfg["gate_nonlin"],
        update_nonlin=cfg["nonlin"],
    )
    arch_cfg.validate()
    plan = SparsityPlan(
        r_w=cfg["rw"] or compression.FULL_RANK,
        r_u=cfg["ru"] or compression.FULL_RANK,
        s_w=cfg["sw"],
        s_u=cfg["su"],
    )
    train_cfg = TrainConfig(
        e1=cfg["e1"],
        e2=cfg["e2"],
        e3=cfg["e3"],
        batch_size=cfg["batch"],
        optimizer=cfg["optimizer"],
        lr=cfg["lr"],
        projection_period=cfg["proj_period"],
        early_stop_patience=cfg["patience"],
        early_stop_metric=cfg["metric"],
        seed=cfg["seed"],
    )
    train_cfg.validate()

    train_ds, val_ds, stats = _load_split(cfg)
    run_dir = _run_dir(cfg)
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w", encoding="ascii") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"run directory: {run_dir}")
    t0 = time.perf_counter()
    model = train_full(arch_cfg, train_ds, val_ds, plan, train_cfg)
    elapsed = time.perf_counter() - t0

    write_history_tsv(model.history, os.path.join(run_dir, "history.tsv"))
    plots.training_curves(model.history, os.path.join(run_dir, "curves.png"))
    horizon = train_ds.horizon
    save_checkpoint(os.path.join(run_dir, "best.fgrn"), model.cell, model.head, stats, horizon, model.masks)
    save_checkpoint(os.path.join(run_dir, "final.fgrn"), model.final_cell, model.final_head, stats, horizon, model.masks)

    val_metrics = evaluate(model.cell, model.head, val_ds)
    line = f"val accuracy={val_metrics['accuracy']:.4f}"
    if val_ds.n_classes == 2:
        line += f" f1={val_metrics['f1']:.4f}"
    print(f"trained {cfg['arch']} in {elapsed:.1f}s ({len(model.history)} epochs, best epoch {model.best_epoch})")
    print(line)
    if cfg["test"] is not None:
        test_ds = load_csv_dataset(cfg["test"], T=cfg["T"], D=cfg["D"], n_classes=train_ds.n_classes, split="test")
        if not cfg["raw"]:
            test_ds = normalize(test_ds, stats)
        test_metrics = evaluate(model.cell, model.head, test_ds)
        line = f"test accuracy={test_metrics['accuracy']:.4f}"
        if test_ds.n_classes == 2:
            line += f" f1={test_metrics['f1']:.4f}"
        print(line)
    return 0


# ---------------------------------------------------------------------------
# Evaluation: float path for checkpoints, integer path for quantized models.


def _binary_f1(y: np.ndarray, pred: np.ndarray) -> float:
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def cmd_eval(args: argparse.Namespace) -> int:
    kind = peek_kind(args.model)
    size_kb = os.path.getsize(args.model) / 1024.0
    if kind == KIND_CHECKPOINT:
        ckpt = load_checkpoint(args.model)
        n_classes = ckpt.head.W_out.shape[0]
        ds = load_csv_dataset(args.data, T=ckpt.horizon, D=ckpt.cell.d_in, n_classes=n_classes, split="test")
        ds = normalize(ds, ckpt.stats)
        t0 = time.perf_counter()
        pred = predict(ckpt.cell, ckpt.head, ds.X)
        elapsed = time.perf_counter() - t0
        print("path=float")
    else:
        qm = load_quantized(args.model)
        n_classes = qm.n_classes
        ds = load_csv_dataset(args.data, T=qm.horizon, D=qm.d_in, n_classes=n_classes, split="test")
        Xq = quantize_input(ds.X, qm.stats)
        t0 = time.perf_counter()
        _, pred = integer_forward(qm, Xq)
        elapsed = time.perf_counter() - t0
        print("path=integer")
    acc = float(np.mean(pred == ds.y))
    print(f"accuracy={acc:.4f}")
    if n_classes == 2:
        print(f"f1={_binary_f1(ds.y, pred):.4f}")
    print(f"size_kb={size_kb:.2f}")
    print(f"ms_per_seq={1000.0 * elapsed / ds.n:.3f}")
    return 0


def cmd_quantize(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.model_in)
    qm = quantize_model(ckpt.cell, ckpt.head, ckpt.stats, ckpt.horizon, ckpt.masks)
    n_bytes = save_quantized(args.model_out, qm)
    breakdown = size_breakdown(qm)
    width = max(len(k) for k in breakdown)
    for name, b in breakdown.items():
        print(f"{name:<{width}}  {b}")
    print(f"{'total':<{width}}  {n_bytes} ({n_bytes / 1024.0:.2f} KB)")
    print(f"wrote {args.model_out}")
    return 0


# ---------------------------------------------------------------------------
# Diagnostics.


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"{flag} expects a comma-separated integer list, got {text!r}") from None


def _diag_condition(args: argparse.Namespace, out_dir: str) -> None:
    from .diagnostics import hard_sigmoid_trace_diagonals

    reports = []
    violations = 0
    for i in range(args.instances):
        gen = rng_mod.stream(args.seed, rng_mod.PROBE, i)
        U = gen.normal(0.0, 1.0, size=(args.hidden, args.hidden))
        U *= args.unorm / spectral_norm(U)
        D_list = hard_sigmoid_trace_diagonals(args.hidden, args.horizon, key=args.seed * 1000 + i)
        if args.alpha is not None:
            alpha = args.alpha
            beta = args.beta if args.beta is not None else 1.0 - alpha
        else:
            m = max(float(spectral_norm(U.T * D_list[k])) for k in range(args.horizon))
            alpha = 1.0 / (args.horizon * m)
            beta = 1.0 - alpha
        rep = conditioning_report(U, D_list, alpha, beta)
        reports.append(rep)
        ok = rep.vacuous() or rep.kappa <= rep.bound * (1 + 1e-9)
        violations += 0 if ok else 1
        tag = "vacuous" if rep.vacuous() else ("ok" if ok else "VIOLATION")
        print(f"instance {i}: kappa={rep.kappa:.6e} bound={rep.bound:.6e} ({tag})")
    reports_to_text(reports, os.path.join(out_dir, "condition.tsv"))
    plots.conditioning_figure(reports, os.path.join(out_dir, "condition.png"))
    finite = sum(not r.vacuous() for r in reports)
    print(f"{len(reports)} instances, {finite} finite bounds, {violations} violations")


def _diag_spectrum(args: argparse.Namespace, out_dir: str) -> None:
    ds = synth_task("delayed_recall", T=args.horizon, N=2, seed=args.seed, d=args.dim)
    arch_cfg = ArchConfig(arch=args.arch, d_hidden=args.hidden)
    arch_cfg.validate()
    init_stream = rng_mod.stream(args.seed, rng_mod.INIT)
    cell = build_cell(arch_cfg, ds.d_in, ds.horizon, SparsityPlan(), init_stream)
    head = init_softmax_head(args.hidden, ds.n_classes, init_stream)
    trace = forward_batch(cell, ds.X[:1])
    norms = gradient_norm_spectrum(trace, head, int(ds.y[0]))
    path = os.path.join(out_dir, "spectrum.tsv")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("t\tgrad_norm\n")
        for t, v in enumerate(norms):
            fh.write(f"{t}\t{v!r}\n")
    plots.spectrum_figure({args.arch: list(norms)}, os.path.join(out_dir, "spectrum.png"))
    print(f"{len(norms)} steps, max/min ratio {spectrum_ratio(norms):.3e}")


def _diag_alphabeta(args: argparse.Namespace, out_dir: str) -> None:
    horizons = _parse_int_list(args.horizons, "--horizons")
    seeds = _parse_int_list(args.seeds, "--seeds")
    trainer = default_recall_trainer(d=args.dim, d_hidden=args.hidden, epochs=args.epochs, lr=args.lr)
    records = alpha_beta_study(horizons, seeds=tuple(seeds), train=trainer)
    reports_to_text(records, os.path.join(out_dir, "alphabeta.tsv"))
    plots.alphabeta_figure(records, os.path.join(out_dir, "alphabeta.png"))
    for r in records:
        status = "diverged" if r.diverged else f"alpha={r.alpha:.4f} beta={r.beta:.4f} rel_err={r.rel_err:.4f}"
        print(f"T={r.horizon} seed={r.seed}: {status} (val={r.val_metric:.3f})")


def cmd_diag(args: argparse.Namespace) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.mode == "condition":
        _diag_condition(args, args.out)
    elif args.mode == "spectrum":
        _diag_spectrum(args, args.out)
    else:
        _diag_alphabeta(args, args.out)
    print(f"reports in {args.out}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    os.makedirs(args.out, exist_ok=True)
    train = synth_task(args.task, T=args.T, N=args.N, seed=args.seed, d=args.dim, n_classes=args.classes, part=0)
    n_test = args.test_samples if args.test_samples is not None else max(2, args.N // 2)
    test = synth_task(args.task, T=args.T, N=n_test, seed=args.seed, d=args.dim, n_classes=args.classes, part=1)
    train_path = os.path.join(args.out, "train.csv")
    test_path = os.path.join(args.out, "test.csv")
    save_csv_dataset(train, train_path)
    save_csv_dataset(test, test_path)
    print(f"wrote {train_path} ({train.n} x T={train.horizon} x D={train.d_in})")
    print(f"wrote {test_path} ({test.n} x T={test.horizon} x D={test.d_in})")
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point.


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastgrnn", description="Train, compress, and inspect gated recurrent models.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic dataset as CSV")
    p.add_argument("task", choices=SYNTH_KINDS)
    p.add_argument("--T", type=int, default=50, help="sequence length")
    p.add_argument("--N", type=int, default=400, help="training sequences")
    p.add_argument("--test-samples", type=int, default=None, help="test sequences (default N // 2)")
    p.add_argument("--dim", type=int, default=4, help="features per step")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data", help="output directory")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("train", help="run the staged training pipeline")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="evaluate a model file on a CSV dataset")
    p.add_argument("model", help="checkpoint or quantized model file")
    p.add_argument("data", help="CSV dataset matching the model dimensions")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("quantize", help="convert a checkpoint to an integer model")
    p.add_argument("model_in", help="trained checkpoint (hard nonlinearities)")
    p.add_argument("model_out", help="output path for the quantized model")
    p.set_defaults(func=cmd_quantize)

    p = subs.add_parser("diag", help="conditioning, gradient-spectrum, and gate-scalar studies")
    p.add_argument("mode", choices=("condition", "spectrum", "alphabeta"))
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--horizon", type=int, default=50, help="condition/spectrum horizon")
    p.add_argument("--dim", type=int, default=4, help="input features for generated probes")
    p.add_argument("--arch", choices=ARCHS, default="fastrnn", help="spectrum mode architecture")
    p.add_argument("--alpha", type=float, default=None, help="condition mode: fix alpha (default: 1/(T*m) recipe)")
    p.add_argument("--beta", type=float, default=None, help="condition mode: fix beta (default 1 - alpha)")
    p.add_argument("--unorm", type=float, default=1.0, help="condition mode: spectral norm of the drawn U")
    p.add_argument("--instances", type=int, default=20, help="condition mode: instances to draw")
    p.add_argument("--horizons", default="50,100,200", help="alphabeta mode: comma-separated horizons")
    p.add_argument("--seeds", default="0,1,2", help="alphabeta mode: comma-separated seeds")
    p.add_argument("--epochs", type=int, default=100, help="alphabeta mode: training epochs per run")
    p.add_argument("--lr", type=float, default=0.01, help="alphabeta mode: learning rate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=os.path.join("out", "diag"), help="report directory")
    p.set_defaults(func=cmd_diag)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, ModelFileError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except ArithmeticError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
