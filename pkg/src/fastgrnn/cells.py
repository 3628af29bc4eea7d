"""Single-timestep state updates for the four recurrent architectures.

All cells share the same skeleton: an affine map of the current input and
previous state feeds one or two nonlinearities, and the new state mixes the
candidate with the previous state. They differ in what controls the mixing:

- RnnParams: no mixing, h_t = tanh(W x_t + U h_{t-1} + b).
- FastRnnParams: two trainable scalars, h_t = alpha * h_tilde + beta * h_{t-1},
  with alpha = sigmoid(alpha_raw), beta = sigmoid(beta_raw).
- FastGrnnParams: a per-coordinate gate z_t reusing the same affine
  pre-activation, h_t = (zeta (1 - z_t) + nu) * h_tilde + z_t * h_{t-1}.
- VectorFastRnnParams: per-coordinate alpha vector with the derived
  beta_i = zeta (1 - alpha_i) + nu (ablation between the two above).

Gate and mixing scalars are stored as unconstrained raw values and squashed
by a sigmoid at use time, so any optimizer step keeps them in (0, 1).
Step functions operate on batches (B, D) x (B, Dh) -> (B, Dh); the
single-vector helpers below wrap them for one sequence element at a time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import compression
from .linalg import ShapeError, nonlin, sigmoid

# Raw scalars are clamped here at init so sigmoid stays well inside (0, 1)
# and gradients through the squashing never start saturated.
RAW_CLAMP = 6.0

GATE_NONLINS = ("tanh", "sigmoid", "relu", "hard_tanh", "hard_sigmoid")
UPDATE_NONLINS = ("tanh", "hard_tanh")


def raw_scalar(value: float) -> np.ndarray:
    """Trainable scalar storage: a 0-d float64 array (mutable in place)."""
    return np.array(float(value), dtype=np.float64)


def clamped_logit(p: float, clamp: float = RAW_CLAMP) -> float:
    p = min(max(p, 1e-12), 1.0 - 1e-12)
    return float(np.clip(np.log(p / (1.0 - p)), -clamp, clamp))


def _check_step_shapes(x_t: np.ndarray, h_prev: np.ndarray, d_in: int, d_hidden: int) -> None:
    if x_t.shape[-1] != d_in:
        raise ShapeError(f"input dim {x_t.shape[-1]} != cell d_in {d_in}")
    if h_prev.shape[-1] != d_hidden:
        raise ShapeError(f"state dim {h_prev.shape[-1]} != cell d_hidden {d_hidden}")


@dataclass
class RnnParams:
    """Baseline recurrent cell, Eq-style h_t = f(W x_t + U h_prev + b)."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    nonlin: str = "tanh"

    arch = "rnn"

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_hidden(self) -> int:
        return self.U.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "U": self.U, "b": self.b}

    def sparse_tensor_names(self) -> tuple[str, ...]:
        return ("W", "U")

    def effective_weights(self) -> tuple[np.ndarray, np.ndarray]:
        return self.W, self.U

    def step_batch(self, x_t, h_prev, W=None, U=None):
        _check_step_shapes(x_t, h_prev, self.d_in, self.d_hidden)
        W = self.W if W is None else W
        U = self.U if U is None else U
        f, _ = nonlin(self.nonlin)
        a = x_t @ W.T + h_prev @ U.T + self.b
        return f(a), a


@dataclass
class FastRnnParams:
    """Residual cell: h_t = alpha * f(W x_t + U h_prev + b) + beta * h_prev."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    alpha_raw: np.ndarray = field(default_factory=lambda: raw_scalar(-2.0))
    beta_raw: np.ndarray = field(default_factory=lambda: raw_scalar(2.0))
    nonlin: str = "tanh"

    arch = "fastrnn"

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_hidden(self) -> int:
        return self.U.shape[0]

    def alpha(self) -> float:
        return float(sigmoid(self.alpha_raw))

    def beta(self) -> float:
        return float(sigmoid(self.beta_raw))

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "W": self.W,
            "U": self.U,
            "b": self.b,
            "alpha_raw": self.alpha_raw,
            "beta_raw": self.beta_raw,
        }

    def sparse_tensor_names(self) -> tuple[str, ...]:
        return ("W", "U")

    def effective_weights(self) -> tuple[np.ndarray, np.ndarray]:
        return self.W, self.U

    def step_batch(self, x_t, h_prev, W=None, U=None):
        _check_step_shapes(x_t, h_prev, self.d_in, self.d_hidden)
        W = self.W if W is None else W
        U = self.U if U is None else U
        f, _ = nonlin(self.nonlin)
        a = x_t @ W.T + h_prev @ U.T + self.b
        h_tilde = f(a)
        h_t = self.alpha() * h_tilde + self.beta() * h_prev
        return h_t, a, h_tilde


@dataclass
class FastGrnnParams:
    """Gated residual cell sharing one pre-activation between gate and candidate.

    W and U may be stored factored (W1 (Dh x r_w) with W2 (D x r_w), same for
    U); the composed products W1 W2^T and U1 U2^T are what every step uses.
    Unfactored cells leave W2/U2 as None and keep the full matrix in W1/U1.
    """

    W1: np.ndarray
    U1: np.ndarray
    b_z: np.ndarray
    b_h: np.ndarray
    W2: np.ndarray | None = None
    U2: np.ndarray | None = None
    zeta_raw: np.ndarray = field(default_factory=lambda: raw_scalar(1.0))
    nu_raw: np.ndarray = field(default_factory=lambda: raw_scalar(-4.0))
    gate_nonlin: str = "sigmoid"
    update_nonlin: str = "tanh"

    arch = "fastgrnn"

    def __post_init__(self):
        if self.gate_nonlin not in GATE_NONLINS:
            raise ValueError(f"gate_nonlin must be one of {GATE_NONLINS}, got {self.gate_nonlin!r}")
        if self.update_nonlin not in UPDATE_NONLINS:
            raise ValueError(f"update_nonlin must be one of {UPDATE_NONLINS}, got {self.update_nonlin!r}")

    @property
    def d_in(self) -> int:
        return self.W1.shape[1] if self.W2 is None else self.W2.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.U1.shape[0]

    @property
    def factored_w(self) -> bool:
        return self.W2 is not None

    @property
    def factored_u(self) -> bool:
        return self.U2 is not None

    def zeta(self) -> float:
        return float(sigmoid(self.zeta_raw))

    def nu(self) -> float:
        return float(sigmoid(self.nu_raw))

    def tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        if self.factored_w:
            out["W1"] = self.W1
            out["W2"] = self.W2
        else:
            out["W"] = self.W1
        if self.factored_u:
            out["U1"] = self.U1
            out["U2"] = self.U2
        else:
            out["U"] = self.U1
        out["b_z"] = self.b_z
        out["b_h"] = self.b_h
        out["zeta_raw"] = self.zeta_raw
        out["nu_raw"] = self.nu_raw
        return out

    def sparse_tensor_names(self) -> tuple[str, ...]:
        names = ("W1", "W2") if self.factored_w else ("W",)
        names += ("U1", "U2") if self.factored_u else ("U",)
        return names

    def effective_weights(self) -> tuple[np.ndarray, np.ndarray]:
        W = compression.compose_lowrank(self.W1, self.W2) if self.factored_w else self.W1
        U = compression.compose_lowrank(self.U1, self.U2) if self.factored_u else self.U1
        return W, U

    def step_batch(self, x_t, h_prev, W=None, U=None):
        _check_step_shapes(x_t, h_prev, self.d_in, self.d_hidden)
        if W is None or U is None:
            W, U = self.effective_weights()
        g, _ = nonlin(self.gate_nonlin)
        u, _ = nonlin(self.update_nonlin)
        s = x_t @ W.T + h_prev @ U.T
        z = g(s + self.b_z)
        c = u(s + self.b_h)
        h_t = (self.zeta() * (1.0 - z) + self.nu()) * c + z * h_prev
        return h_t, s, z, c


@dataclass
class VectorFastRnnParams:
    """FastRNN ablation with per-coordinate alpha and derived beta.

    h_t = alpha * h_tilde + (zeta (1 - alpha) + nu) * h_prev, alpha a vector.
    """

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    alpha_raw: np.ndarray
    zeta_raw: np.ndarray = field(default_factory=lambda: raw_scalar(1.0))
    nu_raw: np.ndarray = field(default_factory=lambda: raw_scalar(-4.0))
    nonlin: str = "tanh"

    arch = "fastrnn-vec"

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_hidden(self) -> int:
        return self.U.shape[0]

    def alpha(self) -> np.ndarray:
        return sigmoid(self.alpha_raw)

    def zeta(self) -> float:
        return float(sigmoid(self.zeta_raw))

    def nu(self) -> float:
        return float(sigmoid(self.nu_raw))

    def beta(self) -> np.ndarray:
        return self.zeta() * (1.0 - self.alpha()) + self.nu()

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "W": self.W,
            "U": self.U,
            "b": self.b,
            "alpha_raw": self.alpha_raw,
            "zeta_raw": self.zeta_raw,
            "nu_raw": self.nu_raw,
        }

    def sparse_tensor_names(self) -> tuple[str, ...]:
        return ("W", "U")

    def effective_weights(self) -> tuple[np.ndarray, np.ndarray]:
        return self.W, self.U

    def step_batch(self, x_t, h_prev, W=None, U=None):
        _check_step_shapes(x_t, h_prev, self.d_in, self.d_hidden)
        W = self.W if W is None else W
        U = self.U if U is None else U
        f, _ = nonlin(self.nonlin)
        a = x_t @ W.T + h_prev @ U.T + self.b
        h_tilde = f(a)
        h_t = self.alpha() * h_tilde + self.beta() * h_prev
        return h_t, a, h_tilde


CellParams = RnnParams | FastRnnParams | FastGrnnParams | VectorFastRnnParams


# ---------------------------------------------------------------------------
# Single-vector step wrappers (one sequence element at a time).


def rnn_step(p: RnnParams, x_t: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    h, _ = p.step_batch(x_t[None, :], h_prev[None, :])
    return h[0]


def fastrnn_step(p: FastRnnParams, x_t, h_prev):
    h, _, h_tilde = p.step_batch(x_t[None, :], h_prev[None, :])
    return h[0], h_tilde[0]


def fastgrnn_step(p: FastGrnnParams, x_t, h_prev):
    h, _, z, c = p.step_batch(x_t[None, :], h_prev[None, :])
    return h[0], z[0], c[0]


def vector_fastrnn_step(p: VectorFastRnnParams, x_t, h_prev):
    h, _, h_tilde = p.step_batch(x_t[None, :], h_prev[None, :])
    return h[0], h_tilde[0]


# ---------------------------------------------------------------------------
# Initialization. Weight draw order (W then U) is fixed: it is part of the
# reproducibility contract. Matrices are fan-in uniform, biases zero, and the
# mixing scalars start in the slow-state regime alpha ~ 1/T, beta ~ 1 - 1/T.


def _draw_wu(rng: np.random.Generator, d_in: int, d_hidden: int) -> tuple[np.ndarray, np.ndarray]:
    bw = 1.0 / np.sqrt(d_in)
    bu = 1.0 / np.sqrt(d_hidden)
    W = rng.uniform(-bw, bw, size=(d_hidden, d_in))
    U = rng.uniform(-bu, bu, size=(d_hidden, d_hidden))
    return W, U


def init_rnn(d_in: int, d_hidden: int, rng: np.random.Generator, nonlin: str = "tanh") -> RnnParams:
    W, U = _draw_wu(rng, d_in, d_hidden)
    return RnnParams(W=W, U=U, b=np.zeros(d_hidden), nonlin=nonlin)


def init_fastrnn(
    d_in: int, d_hidden: int, horizon: int, rng: np.random.Generator, nonlin: str = "tanh"
) -> FastRnnParams:
    W, U = _draw_wu(rng, d_in, d_hidden)
    a0 = 1.0 / max(horizon, 2)
    return FastRnnParams(
        W=W,
        U=U,
        b=np.zeros(d_hidden),
        alpha_raw=raw_scalar(clamped_logit(a0)),
        beta_raw=raw_scalar(clamped_logit(1.0 - a0)),
        nonlin=nonlin,
    )


def init_fastgrnn(
    d_in: int,
    d_hidden: int,
    rng: np.random.Generator,
    r_w: int | None = None,
    r_u: int | None = None,
    gate_nonlin: str = "sigmoid",
    update_nonlin: str = "tanh",
) -> FastGrnnParams:
    W, U = _draw_wu(rng, d_in, d_hidden)
    W1, W2 = (W, None) if r_w is None else compression.factor_init(W, r_w)
    U1, U2 = (U, None) if r_u is None else compression.factor_init(U, r_u)
    return FastGrnnParams(
        W1=W1,
        W2=W2,
        U1=U1,
        U2=U2,
        b_z=np.zeros(d_hidden),
        b_h=np.zeros(d_hidden),
        zeta_raw=raw_scalar(1.0),
        nu_raw=raw_scalar(-4.0),
        gate_nonlin=gate_nonlin,
        update_nonlin=update_nonlin,
    )


def init_vector_fastrnn(
    d_in: int, d_hidden: int, horizon: int, rng: np.random.Generator, nonlin: str = "tanh"
) -> VectorFastRnnParams:
    W, U = _draw_wu(rng, d_in, d_hidden)
    a0 = clamped_logit(1.0 / max(horizon, 2))
    return VectorFastRnnParams(
        W=W,
        U=U,
        b=np.zeros(d_hidden),
        alpha_raw=np.full(d_hidden, a0),
        zeta_raw=raw_scalar(1.0),
        nu_raw=raw_scalar(-4.0),
        nonlin=nonlin,
    )
