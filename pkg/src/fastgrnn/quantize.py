"""Byte quantization and the integer-only inference engine.

Weights are symmetric per-tensor int8 (scale = max|w|/127, zero point 0).
Activations and gate constants are Q1.14 fixed point in int16 (one sign bit,
one headroom bit, value = int / 2**14). Matmuls accumulate int8 x int16
products into int32; the float scale is folded into a (32-bit multiplier,
right shift) pair applied with round-half-up, so inference needs no float
arithmetic anywhere. Models must have been trained with the piecewise-linear
hard nonlinearities; quantizing a tanh/sigmoid model is refused.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bptt import SoftmaxHead
from .cells import CellParams, FastGrnnParams, FastRnnParams, RnnParams, VectorFastRnnParams
from .data import NormStats

Q_BITS = 14
Q_ONE = 1 << Q_BITS  # 1.0 in Q1.14
INT16_MAX = 32767
INT8_MAX = 127

HARD_NONLINS = ("hard_tanh", "hard_sigmoid")

# int8 weight x int16 activation accumulates in int32: the contraction
# dimension must keep dim * 127 * 32767 below 2**31.
MAX_CONTRACT_DIM = (2**31) // (INT8_MAX * INT16_MAX)

# Linear intermediates between factored legs are Q1.14 in int32, clamped to
# +-8.0: unlike nonlinearity outputs they are not confined to (-2, 2). The
# second leg then needs rank * 127 * INNER_MAX < 2**63 head-room (it
# accumulates in int64), and its rescale product must stay in int64 too,
# which caps the rank at 128.
INNER_MAX = (1 << 17) - 1
MAX_FACTOR_RANK = 128


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (quantization rounding)."""
    return np.trunc(x + np.copysign(0.5, x))


def quantize_tensor(m: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric int8 quantization; all-zero tensors get scale 1.

    The scale is rounded to float32 before use: model files store f32 scales,
    and quantizing with the stored value keeps the in-memory model and its
    reloaded copy bit-identical on the integer path.
    """
    if not np.all(np.isfinite(m)):
        raise ValueError("cannot quantize a tensor with non-finite entries")
    peak = float(np.max(np.abs(m))) if m.size else 0.0
    scale = float(np.float32(peak / INT8_MAX)) if peak > 0.0 else 1.0
    # The f32 rounding of the scale can land the peak a hair above 127.
    q = np.clip(round_half_away(np.asarray(m, dtype=np.float64) / scale), -INT8_MAX, INT8_MAX)
    return q.astype(np.int8), scale


def to_q14(x: np.ndarray | float) -> np.ndarray:
    """Float to Q1.14 int16 with saturation at the int16 range."""
    v = round_half_away(np.asarray(x, dtype=np.float64) * Q_ONE)
    return np.clip(v, -INT16_MAX - 1, INT16_MAX).astype(np.int16)


def rescale_params(scale: float) -> tuple[int, int]:
    """Fold a positive float scale into (int32 multiplier, right shift).

    rescale(acc) == round(acc * scale) to within one ulp of the 31-bit
    mantissa; frexp is exact so the pair is platform-independent.
    """
    if not (scale > 0.0 and math.isfinite(scale)):
        raise ValueError(f"rescale needs a positive finite scale, got {scale}")
    mant, exp = math.frexp(scale)  # scale = mant * 2**exp, mant in [0.5, 1)
    mult = round(mant * (1 << 31))
    shift = 31 - exp
    if mult == 1 << 31:  # mant rounded all the way up
        mult >>= 1
        shift -= 1
    if shift < 1:
        raise ValueError(f"scale {scale} too large to fold into a right shift")
    return mult, shift


def apply_rescale(acc: np.ndarray, mult: int, shift: int) -> np.ndarray:
    """(acc * mult + half) >> shift in int64, round half up."""
    prod = acc.astype(np.int64) * np.int64(mult) + (np.int64(1) << (shift - 1))
    return (prod >> np.int64(shift)).astype(np.int32)


def hard_tanh_int(v: np.ndarray) -> np.ndarray:
    return np.clip(v, -Q_ONE, Q_ONE)


def hard_sigmoid_int(v: np.ndarray) -> np.ndarray:
    """(v + 1) / 2 in Q1.14, round half up, clamped to [0, 1]."""
    return np.clip((v + Q_ONE + 1) >> 1, 0, Q_ONE)


def q14_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Q1.14 product with int32 intermediates, round half up on the shift."""
    prod = a.astype(np.int32) * b.astype(np.int32) + (1 << (Q_BITS - 1))
    return prod >> Q_BITS


# ---------------------------------------------------------------------------
# Quantized model container.


@dataclass
class QuantizedTensor:
    q: np.ndarray  # int8, dense storage; off-support entries are 0
    scale: float
    mask: np.ndarray | None = None  # bool support from training, None = dense

    def nnz(self) -> int:
        return int(np.sum(self.mask)) if self.mask is not None else self.q.size

    def dequant(self) -> np.ndarray:
        return self.q.astype(np.float64) * self.scale


@dataclass
class QuantizedModel:
    arch: str
    d_in: int
    d_hidden: int
    n_classes: int
    horizon: int
    gate_nonlin: str  # hard_sigmoid everywhere a gate exists
    update_nonlin: str
    weights: dict[str, QuantizedTensor]  # W/U or W1/W2/U1/U2, plus W_out
    biases_q14: dict[str, np.ndarray]  # int16 Q1.14 recurrent biases
    bias_out: np.ndarray  # int32 at the classifier accumulator scale
    consts_q14: dict[str, np.ndarray]  # int16 Q1.14 gate constants
    stats: NormStats
    ranks: tuple[int, int] = (0, 0)  # (r_w, r_u), 0 = full rank

    def factored(self) -> bool:
        return "W1" in self.weights


def _require_hard(cell: CellParams) -> None:
    if isinstance(cell, FastGrnnParams):
        tags = {"gate": cell.gate_nonlin, "update": cell.update_nonlin}
    else:
        tags = {"candidate": cell.nonlin}
    soft = {k: v for k, v in tags.items() if v not in HARD_NONLINS}
    if soft:
        raise ValueError(
            "quantization requires a model trained with hard nonlinearities "
            f"(hard_tanh/hard_sigmoid); got {soft}. Retrain with the hard "
            "variants; swapping them in after training changes the function."
        )


def _check_contract_dims(cell: CellParams) -> None:
    for name, t in cell.tensors().items():
        if t.ndim == 2 and max(t.shape) > MAX_CONTRACT_DIM:
            raise ValueError(
                f"tensor {name} dim {max(t.shape)} exceeds the "
                f"int32 accumulator limit {MAX_CONTRACT_DIM}"
            )


def quantize_model(
    cell: CellParams,
    head: SoftmaxHead,
    stats: NormStats,
    horizon: int,
    masks: dict[str, np.ndarray] | None = None,
) -> QuantizedModel:
    """Quantize a trained hard-nonlinearity model for integer inference.

    masks (from the sparsification stages) mark which entries are stored in
    the sparse export blocks; entries outside a mask must already be zero.
    """
    _require_hard(cell)
    _check_contract_dims(cell)
    if isinstance(cell, FastGrnnParams):
        for f in (cell.W1 if cell.W2 is not None else None, cell.U1 if cell.U2 is not None else None):
            if f is not None and f.shape[1] > MAX_FACTOR_RANK:
                raise ValueError(f"factor rank {f.shape[1]} exceeds the integer-kernel limit {MAX_FACTOR_RANK}")
    masks = masks or {}
    weights: dict[str, QuantizedTensor] = {}
    biases: dict[str, np.ndarray] = {}
    consts: dict[str, np.ndarray] = {}
    for name, t in cell.tensors().items():
        if name in ("W", "U", "W1", "W2", "U1", "U2"):
            mask = masks.get(name)
            if mask is not None and np.any(t[~mask] != 0.0):
                raise ValueError(f"tensor {name} has nonzero entries outside its mask")
            q, scale = quantize_tensor(t)
            weights[name] = QuantizedTensor(q=q, scale=scale, mask=None if mask is None else mask.copy())
        elif name in ("b", "b_z", "b_h"):
            biases[name] = to_q14(t)

    if isinstance(cell, FastRnnParams):
        consts["alpha"] = to_q14(cell.alpha())
        consts["beta"] = to_q14(cell.beta())
    elif isinstance(cell, VectorFastRnnParams):
        consts["alpha"] = to_q14(cell.alpha())
        consts["beta"] = to_q14(cell.beta())
    elif isinstance(cell, FastGrnnParams):
        consts["zeta"] = to_q14(cell.zeta())
        consts["nu"] = to_q14(cell.nu())

    q_out, s_out = quantize_tensor(head.W_out)
    weights["W_out"] = QuantizedTensor(q=q_out, scale=s_out)
    # Classifier bias joins the int32 logits before any rescale, so it is
    # quantized at the accumulator scale s_out / 2**14.
    b_out = round_half_away(head.b_out * (Q_ONE / s_out))
    if np.any(np.abs(b_out) >= 2**31):
        raise ValueError("classifier bias overflows the int32 accumulator scale")
    ranks = (0, 0)
    gate = "hard_sigmoid"
    update = "hard_tanh"
    if isinstance(cell, FastGrnnParams):
        gate, update = cell.gate_nonlin, cell.update_nonlin
        ranks = (
            0 if cell.W2 is None else cell.W1.shape[1],
            0 if cell.U2 is None else cell.U1.shape[1],
        )
    else:
        update = cell.nonlin
    return QuantizedModel(
        arch=cell.arch,
        d_in=cell.d_in,
        d_hidden=cell.d_hidden,
        n_classes=head.W_out.shape[0],
        horizon=horizon,
        gate_nonlin=gate,
        update_nonlin=update,
        weights=weights,
        biases_q14=biases,
        bias_out=b_out.astype(np.int32),
        consts_q14=consts,
        stats=stats,
        ranks=ranks,
    )


def quantize_input(X: np.ndarray, stats: NormStats) -> np.ndarray:
    """Normalize with the shipped train stats, clip to [-2, 2), emit Q1.14.

    The only float arithmetic of the inference pipeline happens here, at the
    sensor boundary.
    """
    Z = (np.asarray(X, dtype=np.float64) - stats.mean) / stats.std
    v = round_half_away(Z * Q_ONE)
    return np.clip(v, -INT16_MAX - 1, INT16_MAX).astype(np.int16)


# ---------------------------------------------------------------------------
# Integer kernel.


class _IntOps:
    """Integer matmul/rescale helpers bound to one model.

    Rescale pairs are derived from the stored f32 scales with frexp, so two
    loads of the same file always produce identical integer behavior. The
    optional audit list records the dtype of every array the kernel creates;
    tests use it to prove no float sneaks onto the path.
    """

    def __init__(self, qm: QuantizedModel, audit: list | None):
        self.qm = qm
        self.audit = audit
        self._resc = {name: rescale_params(t.scale) for name, t in qm.weights.items()}

    def track(self, arr: np.ndarray) -> np.ndarray:
        if self.audit is not None:
            self.audit.append(arr.dtype)
        return arr

    def matvec(self, name: str, act: np.ndarray) -> np.ndarray:
        """act (B, n) int16 through weight tensor name: int32 accumulate."""
        w = self.qm.weights[name].q
        acc = self.track(act.astype(np.int32) @ w.astype(np.int32).T)
        return acc

    def matvec_rescaled(self, name: str, act: np.ndarray) -> np.ndarray:
        mult, shift = self._resc[name]
        return self.track(apply_rescale(self.matvec(name, act), mult, shift))


def _nonlin_int(tag: str, v: np.ndarray) -> np.ndarray:
    if tag == "hard_tanh":
        return hard_tanh_int(v)
    if tag == "hard_sigmoid":
        return hard_sigmoid_int(v)
    raise ValueError(f"no integer kernel for nonlinearity {tag!r}")


def _clamp16(v: np.ndarray, ops: _IntOps) -> np.ndarray:
    return ops.track(np.clip(v, -INT16_MAX - 1, INT16_MAX).astype(np.int16))


def _lin(ops: _IntOps, kind: str, act: np.ndarray) -> np.ndarray:
    """kind is W or U; picks the dense or factored path.

    Factored weights compose as W = W1 @ W2.T, so the activation goes through
    W2 first (rescaled to Q1.14 at W2's own scale, clamped to the int32
    headroom range), then through W1 with the accumulation in int64.
    """
    if kind + "1" in ops.qm.weights:
        first, second = kind + "2", kind + "1"
        acc = ops.track(act.astype(np.int32) @ ops.qm.weights[first].q.astype(np.int32))
        mult, shift = ops._resc[first]
        inner = ops.track(np.clip(apply_rescale(acc, mult, shift), -INNER_MAX, INNER_MAX))
        acc2 = ops.track(inner.astype(np.int64) @ ops.qm.weights[second].q.astype(np.int64).T)
        mult2, shift2 = ops._resc[second]
        return ops.track(apply_rescale(acc2, mult2, shift2))
    return ops.matvec_rescaled(kind, act)


def integer_forward(
    qm: QuantizedModel,
    Xq: np.ndarray,
    audit: list | None = None,
    return_states: bool = False,
):
    """Run quantized inference on Q1.14 input (B, T, D) int16.

    Returns (logits int32 (B, L), argmax labels int64), plus the int16 hidden
    trajectory (B, T, Dh) when return_states is set. Every intermediate is an
    integer array; pass an audit list to collect their dtypes.
    """
    if Xq.dtype != np.int16:
        raise ValueError(f"integer_forward expects int16 Q1.14 input, got {Xq.dtype}")
    if Xq.ndim != 3 or Xq.shape[2] != qm.d_in:
        raise ValueError(f"input shape {Xq.shape} does not match model d_in {qm.d_in}")
    B, T, _ = Xq.shape
    ops = _IntOps(qm, audit)
    h = ops.track(np.zeros((B, qm.d_hidden), dtype=np.int16))
    states = np.zeros((B, T, qm.d_hidden), dtype=np.int16) if return_states else None
    for t in range(T):
        x_t = Xq[:, t, :]
        if qm.arch == "fastgrnn":
            s = ops.track(_lin(ops, "W", x_t) + _lin(ops, "U", h))
            z = ops.track(_nonlin_int(qm.gate_nonlin, s + qm.biases_q14["b_z"].astype(np.int32)))
            c = ops.track(_nonlin_int(qm.update_nonlin, s + qm.biases_q14["b_h"].astype(np.int32)))
            zeta = qm.consts_q14["zeta"].astype(np.int32)
            nu = qm.consts_q14["nu"].astype(np.int32)
            gain = ops.track(q14_mul(zeta, (Q_ONE - z)) + nu)  # zeta(1-z)+nu, Q1.14
            new_h = ops.track(q14_mul(gain, c) + q14_mul(z, h.astype(np.int32)))
        elif qm.arch in ("fastrnn", "fastrnn-vec"):
            a = ops.track(_lin(ops, "W", x_t) + _lin(ops, "U", h) + qm.biases_q14["b"].astype(np.int32))
            ht = ops.track(_nonlin_int(qm.update_nonlin, a))
            alpha = qm.consts_q14["alpha"].astype(np.int32)
            beta = qm.consts_q14["beta"].astype(np.int32)
            new_h = ops.track(q14_mul(alpha, ht) + q14_mul(beta, h.astype(np.int32)))
        elif qm.arch == "rnn":
            a = ops.track(_lin(ops, "W", x_t) + _lin(ops, "U", h) + qm.biases_q14["b"].astype(np.int32))
            new_h = ops.track(_nonlin_int(qm.update_nonlin, a))
        else:
            raise ValueError(f"unknown architecture tag {qm.arch!r}")
        h = _clamp16(new_h, ops)
        if states is not None:
            states[:, t, :] = h
    logits = ops.track(ops.matvec("W_out", h) + qm.bias_out)
    pred = ops.track(np.argmax(logits, axis=1))
    if return_states:
        return logits, pred, states
    return logits, pred


def dequantized_weights(qm: QuantizedModel) -> dict[str, np.ndarray]:
    """Float view of the quantized weights, for error analysis in tests."""
    return {name: t.dequant() for name, t in qm.weights.items()}


def model_nnz(qm: QuantizedModel) -> dict[str, int]:
    return {name: t.nnz() for name, t in qm.weights.items() if name != "W_out"}
