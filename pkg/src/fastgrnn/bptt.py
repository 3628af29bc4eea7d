"""Sequence forward passes with trace caching, hand-derived reverse-mode
gradients for every architecture, and a finite-difference oracle.

The forward pass caches exactly what backward needs (inputs, states,
pre-activations, gates, candidates); backward recomputes only nonlinearity
derivatives from the cached pre-activations. Batch gradients are the mean
over the batch, folded into the loss gradient once so every downstream
accumulation stays a plain sum in fixed (reverse-time) order, which keeps
gradients bit-identical across replays.

`analytic_fastrnn_grads` evaluates the closed-form gradient sums for the
residual cell directly (products of per-step Jacobian factors); it exists
solely as an independent cross-check of `backward_batch`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cells import CellParams, FastGrnnParams, FastRnnParams, RnnParams, VectorFastRnnParams
from .linalg import NumericalError, ShapeError, nonlin, sigmoid

__all__ = [
    "SoftmaxHead",
    "LogisticHead",
    "ForwardTrace",
    "forward_batch",
    "forward_sequence",
    "loss",
    "batch_loss",
    "backward_batch",
    "backward_sequence",
    "analytic_fastrnn_grads",
    "finite_difference_oracle",
    "predict",
    "init_softmax_head",
]


@dataclass
class SoftmaxHead:
    """Affine map of the final state to class logits, trained with cross-entropy."""

    W_out: np.ndarray  # (L, Dh)
    b_out: np.ndarray  # (L,)

    @property
    def n_classes(self) -> int:
        return self.W_out.shape[0]

    def logits(self, h: np.ndarray) -> np.ndarray:
        return h @ self.W_out.T + self.b_out

    def tensors(self) -> dict[str, np.ndarray]:
        return {"W_out": self.W_out, "b_out": self.b_out}


@dataclass
class LogisticHead:
    """Binary head: score v . h_T with labels in {-1, +1} and log-loss."""

    v: np.ndarray  # (Dh,)

    def score(self, h: np.ndarray) -> np.ndarray:
        return h @ self.v

    def tensors(self) -> dict[str, np.ndarray]:
        return {"v": self.v}


def init_softmax_head(d_hidden: int, n_classes: int, rng: np.random.Generator) -> SoftmaxHead:
    bound = 1.0 / np.sqrt(d_hidden)
    if n_classes < 2:
        raise ValueError("softmax head needs at least 2 classes")
    return SoftmaxHead(
        W_out=rng.uniform(-bound, bound, size=(n_classes, d_hidden)),
        b_out=np.zeros(n_classes),
    )


@dataclass
class ForwardTrace:
    """Everything backward needs about one batched forward pass.

    `A` holds the biased pre-activation for the single-nonlinearity cells and
    the shared unbiased pre-activation for the gated cell (whose two biases
    are added when recomputing derivatives). `W_eff`/`U_eff` are the composed
    weights the pass actually used, cached so backward sees identical values.
    """

    cell: CellParams
    X: np.ndarray  # (B, T, D)
    H: np.ndarray  # (B, T+1, Dh), H[:, 0] is the zero initial state
    A: np.ndarray  # (B, T, Dh)
    W_eff: np.ndarray
    U_eff: np.ndarray
    Htilde: np.ndarray | None = None  # (B, T, Dh) candidates, residual cells
    Z: np.ndarray | None = None  # (B, T, Dh) gates, gated cell
    C: np.ndarray | None = None  # (B, T, Dh) candidates, gated cell

    @property
    def batch(self) -> int:
        return self.X.shape[0]

    @property
    def horizon(self) -> int:
        return self.X.shape[1]

    def h_final(self) -> np.ndarray:
        return self.H[:, -1]

    def nonlin_deriv(self, t: int) -> np.ndarray:
        """Diagonal entries of the candidate nonlinearity's Jacobian at step t (1-based)."""
        cell = self.cell
        if isinstance(cell, FastGrnnParams):
            _, du = nonlin(cell.update_nonlin)
            return du(self.A[:, t - 1] + cell.b_h)
        _, df = nonlin(cell.nonlin)
        return df(self.A[:, t - 1])


def forward_batch(cell: CellParams, X: np.ndarray) -> ForwardTrace:
    """Run a batch of sequences through the cell; h_0 = 0.

    X has shape (B, T, D). Raises NumericalError naming the first timestep
    whose state goes non-finite.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ShapeError(f"forward_batch expects (B, T, D) input, got shape {X.shape}")
    B, T, D = X.shape
    if T < 1:
        raise ShapeError("sequence length must be at least 1")
    if D != cell.d_in:
        raise ShapeError(f"input dim {D} != cell d_in {cell.d_in}")
    Dh = cell.d_hidden
    W, U = cell.effective_weights()
    H = np.zeros((B, T + 1, Dh))
    A = np.empty((B, T, Dh))
    gated = isinstance(cell, FastGrnnParams)
    residual = isinstance(cell, (FastRnnParams, VectorFastRnnParams))
    Htilde = np.empty((B, T, Dh)) if residual else None
    Z = np.empty((B, T, Dh)) if gated else None
    C = np.empty((B, T, Dh)) if gated else None
    h = H[:, 0]
    for t in range(T):
        out = cell.step_batch(X[:, t], h, W=W, U=U)
        h = out[0]
        A[:, t] = out[1]
        if residual:
            Htilde[:, t] = out[2]
        elif gated:
            Z[:, t] = out[2]
            C[:, t] = out[3]
        if not np.all(np.isfinite(h)):
            raise NumericalError(f"non-finite hidden state at timestep {t + 1}")
        H[:, t + 1] = h
    return ForwardTrace(cell=cell, X=X, H=H, A=A, W_eff=W, U_eff=U, Htilde=Htilde, Z=Z, C=C)


def forward_sequence(cell: CellParams, clf, X: np.ndarray):
    """Single-sequence forward: X is (T, D); returns (logits or score, trace)."""
    trace = forward_batch(cell, np.asarray(X, dtype=np.float64)[None, :, :])
    h_T = trace.h_final()
    if isinstance(clf, LogisticHead):
        return float(clf.score(h_T)[0]), trace
    return clf.logits(h_T)[0], trace


# ---------------------------------------------------------------------------
# Losses.


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss(logits, label, kind: str = "softmax") -> float:
    """Single-example loss.

    softmax: cross-entropy of integer label against a logit vector.
    logistic: log(1 + exp(-y * score)) for scalar score and y in {-1, +1}.
    """
    if kind == "logistic":
        y = int(label)
        if y not in (-1, 1):
            raise ValueError(f"logistic label must be -1 or +1, got {label}")
        return float(np.log1p(np.exp(-y * float(logits))))
    logits = np.asarray(logits, dtype=np.float64)
    L = logits.shape[-1]
    y = int(label)
    if not 0 <= y < L:
        raise ValueError(f"label {label} out of range [0, {L})")
    z = logits - logits.max()
    return float(np.log(np.exp(z).sum()) - z[y])


def _softmax_ce_batch(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. logits (already 1/B scaled)."""
    B, L = logits.shape
    if y.min() < 0 or y.max() >= L:
        raise ValueError(f"labels out of range [0, {L})")
    p = _softmax(logits)
    idx = np.arange(B)
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    mean_loss = float(np.mean(logsumexp - z[idx, y]))
    dlogits = p.copy()
    dlogits[idx, y] -= 1.0
    dlogits /= B
    return mean_loss, dlogits


def _logistic_batch(scores: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean logistic loss over scores; labels in {-1, +1}."""
    m = -y * scores
    mean_loss = float(np.mean(np.logaddexp(0.0, m)))
    dscore = -y * sigmoid(m) / scores.shape[0]
    return mean_loss, dscore


def batch_loss(cell: CellParams, clf, X: np.ndarray, y: np.ndarray) -> float:
    """Mean loss of a batch under the given head (forward only)."""
    trace = forward_batch(cell, X)
    h_T = trace.h_final()
    if isinstance(clf, LogisticHead):
        return _logistic_batch(clf.score(h_T), np.asarray(y))[0]
    return _softmax_ce_batch(clf.logits(h_T), np.asarray(y))[0]


def predict(cell: CellParams, clf, X: np.ndarray) -> np.ndarray:
    """Argmax class predictions for a batch (softmax head)."""
    trace = forward_batch(cell, X)
    return np.argmax(clf.logits(trace.h_final()), axis=1)


# ---------------------------------------------------------------------------
# Reverse mode.


def _head_backward(clf, h_T: np.ndarray, y: np.ndarray):
    """Loss, gradient w.r.t. h_T, and head-parameter gradients (all batch means)."""
    grads: dict[str, np.ndarray] = {}
    if isinstance(clf, LogisticHead):
        mean_loss, dscore = _logistic_batch(clf.score(h_T), y)
        grads["v"] = h_T.T @ dscore
        dh = dscore[:, None] * clf.v
    else:
        mean_loss, dlogits = _softmax_ce_batch(clf.logits(h_T), y)
        grads["W_out"] = dlogits.T @ h_T
        grads["b_out"] = dlogits.sum(axis=0)
        dh = dlogits @ clf.W_out
    return mean_loss, dh, grads


def backward_batch(
    trace: ForwardTrace,
    clf,
    y: np.ndarray,
    record_state_grads: bool = False,
):
    """Mean loss and gradients for every trainable tensor of cell and head.

    Returns (loss, grads) or (loss, grads, state_grad_norms) where the norms
    array holds ||dL/dh_t||_F for t = 1..T (vector 2-norm when B = 1).
    """
    cell = trace.cell
    X, H = trace.X, trace.H
    B, T, _ = X.shape
    y = np.asarray(y)
    mean_loss, dH, grads = _head_backward(clf, trace.h_final(), y)
    U = trace.U_eff
    Dh = cell.d_hidden
    GW = np.zeros((Dh, cell.d_in))
    GU = np.zeros((Dh, Dh))
    norms = np.empty(T) if record_state_grads else None

    if isinstance(cell, RnnParams):
        _, df = nonlin(cell.nonlin)
        db = np.zeros(Dh)
        for t in range(T - 1, -1, -1):
            if record_state_grads:
                norms[t] = np.linalg.norm(dH)
            dA = dH * df(trace.A[:, t])
            db += dA.sum(axis=0)
            GW += dA.T @ X[:, t]
            GU += dA.T @ H[:, t]
            dH = dA @ U
        grads.update({"W": GW, "U": GU, "b": db})

    elif isinstance(cell, FastRnnParams):
        _, df = nonlin(cell.nonlin)
        alpha, beta = cell.alpha(), cell.beta()
        db = np.zeros(Dh)
        d_alpha = 0.0
        d_beta = 0.0
        for t in range(T - 1, -1, -1):
            if record_state_grads:
                norms[t] = np.linalg.norm(dH)
            d_alpha += float(np.sum(dH * trace.Htilde[:, t]))
            d_beta += float(np.sum(dH * H[:, t]))
            dA = (alpha * dH) * df(trace.A[:, t])
            db += dA.sum(axis=0)
            GW += dA.T @ X[:, t]
            GU += dA.T @ H[:, t]
            dH = dA @ U + beta * dH
        grads.update(
            {
                "W": GW,
                "U": GU,
                "b": db,
                "alpha_raw": np.array(d_alpha * alpha * (1.0 - alpha)),
                "beta_raw": np.array(d_beta * beta * (1.0 - beta)),
            }
        )

    elif isinstance(cell, VectorFastRnnParams):
        _, df = nonlin(cell.nonlin)
        alpha = cell.alpha()
        zeta, nu = cell.zeta(), cell.nu()
        beta = zeta * (1.0 - alpha) + nu
        db = np.zeros(Dh)
        d_alpha = np.zeros(Dh)
        d_zeta = 0.0
        d_nu = 0.0
        for t in range(T - 1, -1, -1):
            if record_state_grads:
                norms[t] = np.linalg.norm(dH)
            dh_hprev = dH * H[:, t]
            d_alpha += np.sum(dH * trace.Htilde[:, t], axis=0) - zeta * np.sum(dh_hprev, axis=0)
            d_zeta += float(np.sum(dh_hprev * (1.0 - alpha)))
            d_nu += float(np.sum(dh_hprev))
            dA = (dH * alpha) * df(trace.A[:, t])
            db += dA.sum(axis=0)
            GW += dA.T @ X[:, t]
            GU += dA.T @ H[:, t]
            dH = dA @ U + dH * beta
        grads.update(
            {
                "W": GW,
                "U": GU,
                "b": db,
                "alpha_raw": d_alpha * alpha * (1.0 - alpha),
                "zeta_raw": np.array(d_zeta * zeta * (1.0 - zeta)),
                "nu_raw": np.array(d_nu * nu * (1.0 - nu)),
            }
        )

    elif isinstance(cell, FastGrnnParams):
        _, dg = nonlin(cell.gate_nonlin)
        _, du = nonlin(cell.update_nonlin)
        zeta, nu = cell.zeta(), cell.nu()
        db_z = np.zeros(Dh)
        db_h = np.zeros(Dh)
        d_zeta = 0.0
        d_nu = 0.0
        for t in range(T - 1, -1, -1):
            if record_state_grads:
                norms[t] = np.linalg.norm(dH)
            z, c, s = trace.Z[:, t], trace.C[:, t], trace.A[:, t]
            dh_c = dH * c
            d_zeta += float(np.sum(dh_c * (1.0 - z)))
            d_nu += float(np.sum(dh_c))
            dC = dH * (zeta * (1.0 - z) + nu)
            dZ = dH * (H[:, t] - zeta * c)
            dAz = dZ * dg(s + cell.b_z)
            dAc = dC * du(s + cell.b_h)
            db_z += dAz.sum(axis=0)
            db_h += dAc.sum(axis=0)
            dS = dAz + dAc
            GW += dS.T @ X[:, t]
            GU += dS.T @ H[:, t]
            dH = dS @ U + dH * z
        if cell.factored_w:
            grads["W1"] = GW @ cell.W2
            grads["W2"] = GW.T @ cell.W1
        else:
            grads["W"] = GW
        if cell.factored_u:
            grads["U1"] = GU @ cell.U2
            grads["U2"] = GU.T @ cell.U1
        else:
            grads["U"] = GU
        grads.update(
            {
                "b_z": db_z,
                "b_h": db_h,
                "zeta_raw": np.array(d_zeta * zeta * (1.0 - zeta)),
                "nu_raw": np.array(d_nu * nu * (1.0 - nu)),
            }
        )

    else:
        raise TypeError(f"unsupported cell type {type(cell).__name__}")

    if record_state_grads:
        return mean_loss, grads, norms
    return mean_loss, grads


def backward_sequence(trace: ForwardTrace, clf, label, record_state_grads: bool = False):
    """Single-sequence gradients; trace must come from a B = 1 forward."""
    if trace.batch != 1:
        raise ShapeError("backward_sequence expects a single-sequence trace")
    y = np.asarray([label])
    if record_state_grads:
        loss, grads, norms = backward_batch(trace, clf, y, record_state_grads=True)
        return loss, grads, norms
    _, grads = backward_batch(trace, clf, y)
    return grads


# ---------------------------------------------------------------------------
# Closed-form residual-cell gradients (independent cross-check).


def analytic_fastrnn_grads(trace: ForwardTrace, clf: LogisticHead, label: int):
    """Evaluate the residual cell's gradient sums directly from their formula.

    For each timestep the state gradient is an explicit ordered product of
    per-step factors (alpha U^T D_k + beta I) applied to the loss gradient at
    the final state; parameter gradients accumulate rank-1 terms from it. The
    products are rebuilt from scratch per timestep on purpose: this function
    must not share its recurrence with `backward_batch`.
    """
    cell = trace.cell
    if not isinstance(cell, FastRnnParams):
        raise TypeError("analytic gradients are defined for the scalar residual cell only")
    if trace.batch != 1:
        raise ShapeError("analytic_fastrnn_grads expects a single-sequence trace")
    y = int(label)
    if y not in (-1, 1):
        raise ValueError("logistic label must be -1 or +1")
    _, df = nonlin(cell.nonlin)
    alpha, beta = cell.alpha(), cell.beta()
    U = trace.U_eff
    T = trace.horizon
    Dh = cell.d_hidden
    h_T = trace.h_final()[0]
    f_score = float(clf.v @ h_T)
    c = float(sigmoid(-y * f_score))
    grad_hT = -c * y * clf.v
    dv = -c * y * h_T
    d_diag = [df(trace.A[0, t]) for t in range(T)]  # d_diag[t] is D_{t+1}
    dW = np.zeros((Dh, cell.d_in))
    dU = np.zeros((Dh, Dh))
    eye = np.eye(Dh)
    for t in range(1, T + 1):
        M = eye
        for k in range(t, T):  # factors for D_{k+1}, k = t..T-1, left to right
            M = M @ (alpha * (U.T * d_diag[k]) + beta * eye)
        u_t = alpha * d_diag[t - 1] * (M @ grad_hT)
        dW += np.outer(u_t, trace.X[0, t - 1])
        dU += np.outer(u_t, trace.H[0, t - 1])
    return {"W": dW, "U": dU, "v": dv}


# ---------------------------------------------------------------------------
# Finite differences.


def finite_difference_oracle(cell: CellParams, clf, X: np.ndarray, y, eps: float = 1e-5):
    """Central-difference gradients of the mean batch loss, one scalar at a time.

    Slow by design; the oracle must stay independent of the reverse-mode code.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    y = np.atleast_1d(np.asarray(y))
    grads: dict[str, np.ndarray] = {}
    all_tensors = dict(cell.tensors())
    all_tensors.update(clf.tensors())
    for name, t in all_tensors.items():
        g = np.zeros_like(t, dtype=np.float64)
        flat_t = t.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_t.size):
            orig = flat_t[i]
            flat_t[i] = orig + eps
            lo_hi = batch_loss(cell, clf, X, y)
            flat_t[i] = orig - eps
            lo_lo = batch_loss(cell, clf, X, y)
            flat_t[i] = orig
            flat_g[i] = (lo_hi - lo_lo) / (2.0 * eps)
        grads[name] = g
    return grads
