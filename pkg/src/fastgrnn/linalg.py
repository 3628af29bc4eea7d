"""Dense float64 linear algebra, elementwise ops, and nonlinearities.

Every module downstream works on plain numpy float64 arrays built through
the validating constructors here. All functions are deterministic: repeated
calls on identical inputs return bit-identical results within a process.
Training math stays in float64 throughout; float32 appears only on the
checkpoint-serialization boundary and int types only on the quantized
inference path.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "NumericalError",
    "matrix",
    "vector",
    "check_finite",
    "matmul",
    "add",
    "sub",
    "hadamard",
    "scale",
    "nonlin",
    "NONLIN_KINDS",
    "sigmoid",
    "hard_tanh",
    "hard_sigmoid",
    "spectral_norm",
]


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the operation's contract."""


class NumericalError(ArithmeticError):
    """A computation produced or detected non-finite values, or failed to converge."""


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{what} contains non-finite entries")
    return a


def matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Build a validated 2-D float64 matrix (row-major, finite entries)."""
    m = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if m.ndim != 2:
        raise ShapeError(f"matrix expects 2-D data, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {m.shape[1]}")
    return check_finite(m, "matrix")


def vector(data, length: int | None = None) -> np.ndarray:
    """Build a validated 1-D float64 vector."""
    v = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if v.ndim != 1:
        raise ShapeError(f"vector expects 1-D data, got ndim={v.ndim}")
    if length is not None and v.shape[0] != length:
        raise ShapeError(f"expected length {length}, got {v.shape[0]}")
    return check_finite(v, "vector")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} x {b.shape}")
    return a @ b


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    # Strict: no broadcasting, a (3,) vs (3,1) mismatch is an error, not a surprise.
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "add")
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "sub")
    return a - b


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "hadamard")
    return a * b


def scale(a: np.ndarray, c: float) -> np.ndarray:
    return a * float(c)


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[np.logical_not(pos)])
    out[np.logical_not(pos)] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def _dsigmoid(x):
    s = sigmoid(np.asarray(x, dtype=np.float64))
    return s * (1.0 - s)


def _dtanh(x):
    t = np.tanh(x)
    return 1.0 - t * t


def _relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def _drelu(x):
    # Derivative at 0 defined as 0.
    return (np.asarray(x, dtype=np.float64) > 0.0).astype(np.float64)


def hard_tanh(x):
    """Piecewise-linear tanh substitute: clip(x, -1, 1)."""
    return np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)


def _dhard_tanh(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logical_and(x > -1.0, x < 1.0).astype(np.float64)


def hard_sigmoid(x):
    """Piecewise-linear sigmoid substitute: clip((x + 1) / 2, 0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    return np.clip((x + 1.0) * 0.5, 0.0, 1.0)


def _dhard_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logical_and(x > -1.0, x < 1.0).astype(np.float64) * 0.5


_NONLINS = {
    "tanh": (np.tanh, _dtanh),
    "sigmoid": (sigmoid, _dsigmoid),
    "relu": (_relu, _drelu),
    "hard_tanh": (hard_tanh, _dhard_tanh),
    "hard_sigmoid": (hard_sigmoid, _dhard_sigmoid),
}

NONLIN_KINDS = tuple(_NONLINS)


def nonlin(kind: str):
    """Return the (function, derivative) pair for a nonlinearity tag."""
    try:
        return _NONLINS[kind]
    except KeyError:
        raise ValueError(f"unknown nonlinearity {kind!r}, expected one of {NONLIN_KINDS}") from None


# Fixed start vector stream for the power iteration; any fixed key works,
# it only needs to avoid being orthogonal to the leading singular direction.
_POWER_ITER_KEY = 0x5EED


def spectral_norm(m: np.ndarray, rtol: float = 1e-9, max_iters: int = 10_000) -> float:
    """Largest singular value via power iteration on the Gram matrix.

    Iterates v <- G v / ||G v|| with G the smaller of m^T m and m m^T and a
    fixed randomized start vector, until the Rayleigh estimate of the top
    eigenvalue is stable to `rtol` relative change. Raises NumericalError
    with the achieved tolerance if `max_iters` is exhausted.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError("spectral_norm expects a 2-D matrix")
    check_finite(m, "spectral_norm input")
    if m.size == 0 or not m.any():
        return 0.0
    g = m.T @ m if m.shape[0] >= m.shape[1] else m @ m.T
    # Scale down so g entries stay comfortably finite even for large norms.
    top = np.abs(g).max()
    g = g / top
    rng = np.random.Generator(np.random.Philox(key=_POWER_ITER_KEY))
    v = rng.standard_normal(g.shape[0])
    v /= np.linalg.norm(v)
    prev = 0.0
    rel = np.inf
    for _ in range(max_iters):
        w = g @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # Start vector fell in the kernel; re-draw once from the stream.
            v = rng.standard_normal(g.shape[0])
            v /= np.linalg.norm(v)
            continue
        v = w / nw
        est = float(v @ (g @ v))
        rel = abs(est - prev) / max(est, np.finfo(np.float64).tiny)
        if rel <= rtol:
            return float(np.sqrt(est * top))
        prev = est
    raise NumericalError(
        f"spectral_norm power iteration did not converge: achieved rtol {rel:.3e} > {rtol:.1e}"
    )
