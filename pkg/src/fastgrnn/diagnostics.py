"""Gradient-conditioning checks and the alpha/beta scaling study.

The object of interest is the propagation matrix

    M(U) = prod_{k=t}^{T-1} (alpha U^T D_{k+1} + beta I)

whose condition number kappa controls how faithfully gradients traverse the
horizon. With r = alpha/beta and m = max_k ||U^T D_{k+1}||_2, kappa is
bounded by ((1 + r m) / (1 - r m))^(T-t) whenever r m < 1; the bound is
vacuous (+inf) otherwise. At alpha = 0 the product is the identity and
kappa = 1 exactly. D_{k} is the diagonal of the state nonlinearity's
derivative at step k, taken from a real forward trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .bptt import ForwardTrace, backward_sequence, forward_batch
from .cells import CellParams, init_fastrnn
from .data import synth_task
from .linalg import ShapeError, matrix, spectral_norm

# Singular values below this are treated as numerical zero; kappa is then
# reported as +inf rather than an astronomically noisy quotient.
SIGMA_FLOOR = 1e-300


def build_M(U: np.ndarray, D_list: np.ndarray, alpha: float, beta: float, t: int = 0) -> np.ndarray:
    """The ordered product prod_{k=t}^{T-1} (alpha U^T D_list[k] + beta I).

    D_list is (T, Dh): row k holds the diagonal of D_{k+1}. Factors multiply
    left to right in increasing k. t = T yields the identity.
    """
    U = matrix(U)
    if U.shape[0] != U.shape[1]:
        raise ShapeError(f"U must be square, got {U.shape}")
    D_list = np.atleast_2d(np.asarray(D_list, dtype=np.float64))
    T, dh = D_list.shape
    if dh != U.shape[0]:
        raise ShapeError(f"D rows have width {dh}, U is {U.shape}")
    if not 0 <= t <= T:
        raise ShapeError(f"t must be in [0, {T}], got {t}")
    M = np.eye(dh)
    Ut = U.T
    for k in range(t, T):
        M = M @ (alpha * (Ut * D_list[k]) + beta * np.eye(dh))
    return M


def factor_norms(U: np.ndarray, D_list: np.ndarray, t: int = 0) -> np.ndarray:
    """||U^T D_{k+1}||_2 for k = t..T-1 (column scaling, then spectral norm)."""
    U = matrix(U)
    D_list = np.atleast_2d(np.asarray(D_list, dtype=np.float64))
    return np.array([spectral_norm(U.T * D_list[k]) for k in range(t, D_list.shape[0])])


def condition_bound(U: np.ndarray, D_list: np.ndarray, alpha: float, beta: float, t: int = 0) -> float:
    """RHS of the kappa bound; +inf when (alpha/beta) max_k ||U^T D|| >= 1."""
    if beta <= 0.0:
        raise ValueError(f"beta must be positive, got {beta}")
    if alpha == 0.0:
        return 1.0
    norms = factor_norms(U, D_list, t)
    if norms.size == 0:
        return 1.0
    x = (alpha / beta) * float(np.max(norms))
    steps = norms.size
    if x >= 1.0:
        return math.inf
    return ((1.0 + x) / (1.0 - x)) ** steps


def empirical_condition(M: np.ndarray) -> float:
    """kappa(M) by full SVD; underflowing sigma_min reports +inf."""
    s = np.linalg.svd(M, compute_uv=False)
    if s[-1] < SIGMA_FLOOR:
        return math.inf
    return float(s[0] / s[-1])


@dataclass
class ConditioningReport:
    horizon: int
    start: int  # the t the product starts at
    alpha: float
    beta: float
    factor_norms: list[float]
    bound: float
    kappa: float
    grad_norms: list[float] = field(default_factory=list)

    def vacuous(self) -> bool:
        return not math.isfinite(self.bound)


def conditioning_report(
    U: np.ndarray, D_list: np.ndarray, alpha: float, beta: float, t: int = 0, grad_norms=None
) -> ConditioningReport:
    D_list = np.atleast_2d(np.asarray(D_list, dtype=np.float64))
    norms = factor_norms(U, D_list, t)
    return ConditioningReport(
        horizon=D_list.shape[0],
        start=t,
        alpha=float(alpha),
        beta=float(beta),
        factor_norms=[float(v) for v in norms],
        bound=condition_bound(U, D_list, alpha, beta, t),
        kappa=empirical_condition(build_M(U, D_list, alpha, beta, t)),
        grad_norms=[] if grad_norms is None else [float(v) for v in grad_norms],
    )


def gradient_norm_spectrum(trace: ForwardTrace, clf, label: int) -> np.ndarray:
    """||dL/dh_t||_2 for t = 1..T, from reverse-mode state gradients."""
    _, _, norms = backward_sequence(trace, clf, label, record_state_grads=True)
    return norms


def spectrum_ratio(norms: np.ndarray) -> float:
    """max/min of a gradient-norm spectrum; +inf once any norm underflows."""
    lo = float(np.min(norms))
    hi = float(np.max(norms))
    if lo <= 0.0:
        return math.inf
    return hi / lo


def hard_sigmoid_trace_diagonals(d_hidden: int, horizon: int, key: int) -> np.ndarray:
    """Nonlinearity-derivative diagonals from a real hard-sigmoid forward run.

    Drives a freshly initialized hard-sigmoid cell with unit Gaussian noise
    and reads D_{k} off the trace, so the diagonals have the exact support
    pattern the analysis assumes (entries in {0, 1/2}).
    """
    gen = rng_mod.stream(key, rng_mod.PROBE)
    cell = init_fastrnn(d_hidden, d_hidden, horizon, gen, nonlin="hard_sigmoid")
    X = gen.normal(0.0, 1.0, size=(1, horizon, d_hidden))
    trace = forward_batch(cell, X)
    return np.stack([trace.nonlin_deriv(t)[0] for t in range(1, horizon + 1)])


# ---------------------------------------------------------------------------
# Alpha/beta scaling study.


@dataclass
class AlphaBetaRecord:
    task: str
    horizon: int
    seed: int
    alpha: float
    beta: float
    ratio: float  # alpha / beta
    rel_err: float  # |beta - (1 - alpha)| / beta
    val_metric: float
    diverged: bool = False


def alpha_beta_record(task: str, horizon: int, seed: int, cell, val_metric: float) -> AlphaBetaRecord:
    a, b = float(cell.alpha()), float(cell.beta())
    return AlphaBetaRecord(
        task=task,
        horizon=horizon,
        seed=seed,
        alpha=a,
        beta=b,
        ratio=a / b,
        rel_err=abs(b - (1.0 - a)) / b,
        val_metric=val_metric,
    )


def alpha_beta_study(T_list, seeds=(0, 1, 2), task="delayed_recall", train=None) -> list[AlphaBetaRecord]:
    """Train one cell per (T, seed) and collect the learnt alpha and beta.

    `train` is a callable (T, seed) -> (cell, val_metric) supplied by the
    caller (the CLI wires in the real trainer); training divergence is
    recorded as a NaN row, not raised.
    """
    if train is None:
        raise ValueError("alpha_beta_study needs a train callable")
    records = []
    for T in T_list:
        for seed in seeds:
            try:
                cell, metric = train(T, seed)
            except ArithmeticError:
                records.append(
                    AlphaBetaRecord(
                        task=task,
                        horizon=T,
                        seed=seed,
                        alpha=math.nan,
                        beta=math.nan,
                        ratio=math.nan,
                        rel_err=math.nan,
                        val_metric=math.nan,
                        diverged=True,
                    )
                )
                continue
            records.append(alpha_beta_record(task, T, seed, cell, metric))
    return records


def default_recall_trainer(d: int = 4, d_hidden: int = 16, epochs: int = 100, lr: float = 0.01):
    """The frozen study configuration: Adam on raw-scale delayed_recall."""
    from .compression import FULL_RANK, SparsityPlan
    from .training import ArchConfig, TrainConfig, evaluate, train_full

    def train(T: int, seed: int):
        tr = synth_task("delayed_recall", T=T, N=400, seed=seed, d=d, part=0)
        te = synth_task("delayed_recall", T=T, N=200, seed=seed, d=d, part=1)
        from .data import train_val_split

        trn, val = train_val_split(tr, 0.2, seed=seed)
        model = train_full(
            ArchConfig(arch="fastrnn", d_hidden=d_hidden),
            trn,
            val,
            SparsityPlan(r_w=FULL_RANK, r_u=FULL_RANK),
            TrainConfig(e1=epochs, e2=0, e3=0, batch_size=50, lr=lr, optimizer="adam", seed=seed),
        )
        return model.cell, evaluate(model.cell, model.head, te)["accuracy"]

    return train


# ---------------------------------------------------------------------------
# Lossless text serialization for both report types.


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ",".join(repr(float(x)) for x in v) if v else "-"
    return str(v)


def reports_to_text(records, path=None) -> str:
    """Serialize dataclass records to a tab-delimited block, repr floats."""
    if not records:
        raise ValueError("nothing to serialize")
    fields = list(records[0].__dataclass_fields__)
    lines = ["\t".join(fields)]
    for r in records:
        lines.append("\t".join(_fmt(getattr(r, f)) for f in fields))
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(text)
    return text


def _parse(field_name: str, raw: str, py_type):
    if py_type is float:
        return float(raw)
    if py_type is int:
        return int(raw)
    if py_type is bool:
        return raw == "1"
    if py_type is str:
        return raw
    # list fields
    return [] if raw == "-" else [float(x) for x in raw.split(",")]


def reports_from_text(text: str, cls) -> list:
    lines = [ln for ln in text.splitlines() if ln]
    header = lines[0].split("\t")
    hints = {f: t.type for f, t in cls.__dataclass_fields__.items()}
    type_map = {"int": int, "float": float, "str": str, "bool": bool}
    out = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        kwargs = {}
        for name, raw in zip(header, parts):
            hint = hints[name]
            py = type_map.get(hint if isinstance(hint, str) else hint.__name__, list)
            kwargs[name] = _parse(name, raw, py)
        out.append(cls(**kwargs))
    return out
