"""Optimizers, learning-rate schedule, and the three-stage trainer.

Stage I trains the (possibly low-rank factored) dense parameters. Stage II
adds iterative hard thresholding: every `projection_period` optimizer steps
the sparsifiable tensors are projected back onto their nonzero budgets, and
the masks from the stage's final projection define the support. Stage III
freezes that support, masking both gradients and parameters at every step.
Optimizer state resets at stage boundaries (supports change discontinuously,
stale moments on pruned entries are meaningless).

Replays are bitwise: weight init, epoch shuffling, and data synthesis draw
from separate named streams of one seed, and history records carry no
wall-clock state.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import compression, rng as rng_mod
from .bptt import SoftmaxHead, backward_batch, forward_batch, init_softmax_head
from .cells import (
    CellParams,
    init_fastgrnn,
    init_fastrnn,
    init_rnn,
    init_vector_fastrnn,
)
from .compression import SparsityPlan
from .linalg import NumericalError

ARCHS = ("rnn", "fastrnn", "fastrnn-vec", "fastgrnn")
OPTIMIZERS = ("sgd", "momentum", "adam")
METRICS = ("accuracy", "f1")


@dataclass(frozen=True)
class ArchConfig:
    """What to build: architecture, width, and nonlinearity choices."""

    arch: str
    d_hidden: int
    nonlin: str = "tanh"  # candidate nonlinearity (rnn, fastrnn, fastrnn-vec)
    gate_nonlin: str = "sigmoid"  # fastgrnn only
    update_nonlin: str = "tanh"  # fastgrnn only
    clip: float | None = None  # max-norm gradient clip, standard-RNN baseline only

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.d_hidden < 1:
            raise ValueError(f"d_hidden must be >= 1, got {self.d_hidden}")
        if self.clip is not None and self.arch != "rnn":
            raise ValueError("gradient clipping is reserved for the standard-RNN baseline")


@dataclass(frozen=True)
class TrainConfig:
    e1: int = 100
    e2: int = 100
    e3: int = 100
    batch_size: int = 100
    optimizer: str = "momentum"
    lr: float = 1e-2
    momentum_mu: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay_factor: float = 0.1
    # Global epochs at which lr multiplies by the factor; None applies the
    # default two-thirds split of the total epoch budget.
    lr_decay_at: tuple[int, ...] | None = None
    projection_period: int = 20
    # Alternative reading of stage II (gradients masked between projections);
    # off by default, kept as an explicit knob.
    mask_between_projections: bool = False
    early_stop_patience: int | None = 25
    early_stop_metric: str = "accuracy"
    seed: int = 42

    def validate(self) -> None:
        if min(self.e1, self.e2, self.e3) < 0:
            raise ValueError("stage epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.projection_period < 1:
            raise ValueError("projection_period must be >= 1")
        if self.early_stop_metric not in METRICS:
            raise ValueError(f"early_stop_metric must be one of {METRICS}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1 (or None)")

    def total_epochs(self) -> int:
        return self.e1 + self.e2 + self.e3

    def decay_epochs(self) -> tuple[int, ...]:
        if self.lr_decay_at is not None:
            return self.lr_decay_at
        total = self.total_epochs()
        return (max(1, (2 * total) // 3),) if total else ()

    def lr_at(self, global_epoch: int) -> float:
        """Learning rate for a 1-based global epoch index."""
        passed = sum(1 for e in self.decay_epochs() if global_epoch > e)
        return self.lr * self.lr_decay_factor**passed


# ---------------------------------------------------------------------------
# Optimizers. All mutate the parameter arrays in place and validate gradient
# finiteness (a NaN escaping into the weights would poison every later epoch).


def _check_grads_finite(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for tensor {name!r}")


class Sgd:
    def reset(self) -> None:
        pass

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        _check_grads_finite(grads)
        for name, p in params.items():
            p -= lr * grads[name]


class Momentum:
    """Polyak heavy-ball: v = mu v + g; p -= lr v."""

    def __init__(self, mu: float = 0.9):
        self.mu = mu
        self._v: dict[str, np.ndarray] = {}

    def reset(self) -> None:
        self._v.clear()

    def step(self, params, grads, lr: float) -> None:
        _check_grads_finite(grads)
        for name, p in params.items():
            v = self._v.get(name)
            if v is None:
                v = self._v[name] = np.zeros_like(p)
            v *= self.mu
            v += grads[name]
            p -= lr * v


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def reset(self) -> None:
        self._m.clear()
        self._v.clear()
        self._t = 0

    def step(self, params, grads, lr: float) -> None:
        _check_grads_finite(grads)
        self._t += 1
        c1 = 1.0 - self.beta1**self._t
        c2 = 1.0 - self.beta2**self._t
        for name, p in params.items():
            g = grads[name]
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return Sgd()
    if cfg.optimizer == "momentum":
        return Momentum(cfg.momentum_mu)
    return Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def optimizer_step(params, grads, opt, lr: float) -> None:
    """Single update through whichever optimizer instance is supplied."""
    opt.step(params, grads, lr)


# ---------------------------------------------------------------------------
# Metrics and history records.


def evaluate(cell: CellParams, head: SoftmaxHead, ds, batch: int = 512) -> dict[str, float]:
    """Accuracy (and F1 with class 1 positive, binary only) plus mean loss."""
    correct = 0
    losses = []
    tp = fp = fn = 0
    for lo in range(0, ds.n, batch):
        X = ds.X[lo : lo + batch]
        yb = ds.y[lo : lo + batch]
        trace = forward_batch(cell, X)
        logits = head.logits(trace.h_final())
        pred = np.argmax(logits, axis=1)
        correct += int(np.sum(pred == yb))
        z = logits - logits.max(axis=1, keepdims=True)
        losses.append(np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(yb)), yb])
        if ds.n_classes == 2:
            tp += int(np.sum((pred == 1) & (yb == 1)))
            fp += int(np.sum((pred == 1) & (yb == 0)))
            fn += int(np.sum((pred == 0) & (yb == 1)))
    out = {
        "accuracy": correct / ds.n,
        "loss": float(np.mean(np.concatenate(losses))),
    }
    if ds.n_classes == 2:
        denom = 2 * tp + fp + fn
        out["f1"] = (2 * tp / denom) if denom else 0.0
    return out


@dataclass
class EpochRecord:
    epoch: int  # global, 1-based
    stage: int
    lr: float
    train_loss: float
    val_metric: float
    alpha: float = math.nan  # mean over coordinates for the vector cell
    beta: float = math.nan
    zeta: float = math.nan
    nu: float = math.nan
    nnz: dict[str, int] = field(default_factory=dict)


def _scalar_snapshot(cell: CellParams) -> dict[str, float]:
    out = {"alpha": math.nan, "beta": math.nan, "zeta": math.nan, "nu": math.nan}
    if cell.arch == "fastrnn":
        out["alpha"], out["beta"] = cell.alpha(), cell.beta()
    elif cell.arch == "fastrnn-vec":
        out["alpha"] = float(np.mean(cell.alpha()))
        out["beta"] = float(np.mean(cell.beta()))
        out["zeta"], out["nu"] = cell.zeta(), cell.nu()
    elif cell.arch == "fastgrnn":
        out["zeta"], out["nu"] = cell.zeta(), cell.nu()
    return out


HISTORY_BASE_COLUMNS = ("epoch", "stage", "lr", "train_loss", "val_metric", "alpha", "beta", "zeta", "nu")


def write_history_tsv(records: list[EpochRecord], path) -> None:
    """Line-delimited history; floats via repr so replays are byte-identical."""
    nnz_names = sorted({name for r in records for name in r.nnz})
    cols = list(HISTORY_BASE_COLUMNS) + [f"nnz_{n}" for n in nnz_names]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\t".join(cols) + "\n")
        for r in records:
            row = [
                str(r.epoch),
                str(r.stage),
                repr(float(r.lr)),
                repr(float(r.train_loss)),
                repr(float(r.val_metric)),
                repr(float(r.alpha)),
                repr(float(r.beta)),
                repr(float(r.zeta)),
                repr(float(r.nu)),
            ]
            row += [str(r.nnz.get(n, -1)) for n in nnz_names]
            fh.write("\t".join(row) + "\n")


def read_history_tsv(path) -> list[dict[str, float]]:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        rows = []
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            row: dict[str, float] = {}
            for key, val in zip(header, parts):
                row[key] = int(val) if key in ("epoch", "stage") or key.startswith("nnz_") else float(val)
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# The trainer.


@dataclass
class TrainedModel:
    cell: CellParams  # best-validation checkpoint (equals final when untracked)
    head: SoftmaxHead
    masks: dict[str, np.ndarray] | None
    history: list[EpochRecord]
    best_val_metric: float
    best_epoch: int
    final_cell: CellParams = None
    final_head: SoftmaxHead = None


def build_cell(arch_cfg: ArchConfig, d_in: int, horizon: int, plan: SparsityPlan, init_stream) -> CellParams:
    arch_cfg.validate()
    if arch_cfg.arch == "rnn":
        return init_rnn(d_in, arch_cfg.d_hidden, init_stream, nonlin=arch_cfg.nonlin)
    if arch_cfg.arch == "fastrnn":
        return init_fastrnn(d_in, arch_cfg.d_hidden, horizon, init_stream, nonlin=arch_cfg.nonlin)
    if arch_cfg.arch == "fastrnn-vec":
        return init_vector_fastrnn(d_in, arch_cfg.d_hidden, horizon, init_stream, nonlin=arch_cfg.nonlin)
    return init_fastgrnn(
        d_in,
        arch_cfg.d_hidden,
        init_stream,
        r_w=plan.r_w,
        r_u=plan.r_u,
        gate_nonlin=arch_cfg.gate_nonlin,
        update_nonlin=arch_cfg.update_nonlin,
    )


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor


class _StageRunner:
    """Shared epoch loop used by all three stages of train_full."""

    def __init__(self, cell, head, train_ds, val_ds, cfg: TrainConfig, arch_cfg: ArchConfig, shuffle_stream):
        self.cell = cell
        self.head = head
        self.train_ds = train_ds
        self.val_ds = val_ds
        self.cfg = cfg
        self.arch_cfg = arch_cfg
        self.shuffle = shuffle_stream
        self.params = dict(cell.tensors())
        self.params.update(head.tensors())
        self.step_count = 0

    def run_epoch(self, lr: float, opt, plan=None, masks=None, freeze=False) -> float:
        """One pass over the training set; returns the mean train loss.

        plan + not freeze: stage II (project every projection_period steps,
        masks updated from each projection). freeze: stage III (grads and
        params masked with the fixed support every step).
        """
        cfg = self.cfg
        ds = self.train_ds
        order = self.shuffle.permutation(ds.n)
        total_loss = 0.0
        for lo in range(0, ds.n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            trace = forward_batch(self.cell, ds.X[idx])
            batch_loss_val, grads = backward_batch(trace, self.head, ds.y[idx])
            if not math.isfinite(batch_loss_val):
                raise NumericalError("non-finite training loss")
            if self.arch_cfg.clip is not None:
                _clip_grads(grads, self.arch_cfg.clip)
            if masks is not None and (freeze or cfg.mask_between_projections):
                compression.mask_grads_inplace(grads, masks)
            opt.step(self.params, grads, lr)
            if freeze:
                compression.mask_params_inplace(self.cell, masks)
            elif plan is not None:
                self.step_count += 1
                if self.step_count % cfg.projection_period == 0:
                    new_masks = compression.project_params(self.cell, plan)
                    masks.clear()
                    masks.update(new_masks)
            total_loss += batch_loss_val * len(idx)
        return total_loss / ds.n


def train_full(
    arch_cfg: ArchConfig,
    train_ds,
    val_ds,
    plan: SparsityPlan,
    cfg: TrainConfig,
) -> TrainedModel:
    """Run stages I -> II -> III and return the trained model.

    The returned model is the best-validation checkpoint of the final stage
    (restored at the end); with e3 = 0 the final parameters are returned as
    trained. History carries one record per epoch across all stages.
    """
    cfg.validate()
    plan.validate(train_ds.d_in, arch_cfg.d_hidden)
    init_stream = rng_mod.stream(cfg.seed, rng_mod.INIT)
    shuffle_stream = rng_mod.stream(cfg.seed, rng_mod.SHUFFLE)
    cell = build_cell(arch_cfg, train_ds.d_in, train_ds.horizon, plan, init_stream)
    head = init_softmax_head(arch_cfg.d_hidden, train_ds.n_classes, init_stream)
    runner = _StageRunner(cell, head, train_ds, val_ds, cfg, arch_cfg, shuffle_stream)
    metric_key = cfg.early_stop_metric if cfg.early_stop_metric in ("accuracy", "f1") else "accuracy"
    if metric_key == "f1" and train_ds.n_classes != 2:
        raise ValueError("f1 early stopping requires a binary task")

    history: list[EpochRecord] = []
    masks: dict[str, np.ndarray] | None = None
    best_metric = -math.inf
    best_epoch = 0
    best_snapshot = None
    global_epoch = 0

    def record(stage: int, lr: float, train_loss: float, val_metric: float) -> None:
        scalars = _scalar_snapshot(cell)
        nnz = compression.nnz_counts(cell) if (stage >= 2 or not plan.is_identity()) else {}
        history.append(
            EpochRecord(
                epoch=global_epoch,
                stage=stage,
                lr=lr,
                train_loss=train_loss,
                val_metric=val_metric,
                nnz=nnz,
                **scalars,
            )
        )

    for stage, epochs in ((1, cfg.e1), (2, cfg.e2), (3, cfg.e3)):
        if epochs == 0:
            if stage == 2:
                # Support must still exist for stage III: project once.
                masks = compression.project_params(cell, plan)
            continue
        opt = make_optimizer(cfg)  # fresh state at each stage boundary
        if stage == 2:
            masks = {}
        stage_best = -math.inf
        since_improve = 0
        track_best = stage == 3
        for _ in range(epochs):
            global_epoch += 1
            lr = cfg.lr_at(global_epoch)
            train_loss = runner.run_epoch(
                lr,
                opt,
                plan=plan if stage == 2 else None,
                masks=masks if stage >= 2 else None,
                freeze=stage == 3,
            )
            val_metric = evaluate(cell, head, val_ds)[metric_key]
            record(stage, lr, train_loss, val_metric)
            if track_best and val_metric > best_metric:
                best_metric = val_metric
                best_epoch = global_epoch
                best_snapshot = (copy.deepcopy(cell), copy.deepcopy(head))
            if stage >= 2 and cfg.early_stop_patience is not None:
                if val_metric > stage_best:
                    stage_best = val_metric
                    since_improve = 0
                else:
                    since_improve += 1
                    if since_improve >= cfg.early_stop_patience:
                        break
        if stage == 2:
            # The support is defined by the final projection of the stage.
            new_masks = compression.project_params(cell, plan)
            masks.clear()
            masks.update(new_masks)

    final_cell, final_head = cell, head
    if best_snapshot is not None:
        cell, head = best_snapshot
    if best_epoch == 0:
        best_metric = history[-1].val_metric if history else math.nan
        best_epoch = global_epoch
    return TrainedModel(
        cell=cell,
        head=head,
        masks=masks,
        history=history,
        best_val_metric=best_metric,
        best_epoch=best_epoch,
        final_cell=final_cell,
        final_head=final_head,
    )


def train_stage(cell, head, train_ds, val_ds, stage: int, plan, cfg: TrainConfig, masks=None):
    """Run a single stage on an existing model (helper mirroring train_full's loop).

    Returns (masks, history records). Stage II requires a plan; stage III
    requires masks from a previous projection.
    """
    cfg.validate()
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2, or 3, got {stage}")
    if stage == 2 and plan is None:
        raise ValueError("stage II requires a sparsity plan")
    if stage == 3 and masks is None:
        raise ValueError("stage III requires support masks")
    arch_cfg = ArchConfig(arch=cell.arch, d_hidden=cell.d_hidden)
    runner = _StageRunner(cell, head, train_ds, val_ds, cfg, arch_cfg, rng_mod.stream(cfg.seed, rng_mod.SHUFFLE))
    opt = make_optimizer(cfg)
    epochs = (cfg.e1, cfg.e2, cfg.e3)[stage - 1]
    if stage == 2:
        masks = {}
    records: list[EpochRecord] = []
    for epoch in range(1, epochs + 1):
        lr = cfg.lr_at(epoch)
        train_loss = runner.run_epoch(
            lr,
            opt,
            plan=plan if stage == 2 else None,
            masks=masks if stage >= 2 else None,
            freeze=stage == 3,
        )
        val_metric = evaluate(cell, head, val_ds)["accuracy"]
        scalars = _scalar_snapshot(cell)
        records.append(
            EpochRecord(
                epoch=epoch,
                stage=stage,
                lr=lr,
                train_loss=train_loss,
                val_metric=val_metric,
                nnz=compression.nnz_counts(cell) if stage >= 2 else {},
                **scalars,
            )
        )
    if stage == 2 and epochs > 0:
        new_masks = compression.project_params(cell, plan)
        masks.clear()
        masks.update(new_masks)
    return masks, records
