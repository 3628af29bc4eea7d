"""Low-rank factorization, magnitude hard thresholding, and support masks.

A SparsityPlan carries ranks and per-factor density fractions; budgets are
ceil(fraction * element count) per factor. Stage II projects parameters onto
that budget set every few optimizer steps (iterative hard thresholding) and
stage III freezes the resulting support: gradients and parameters are masked
every step so off-support entries stay exactly zero. Biases and gate scalars
are never factored or sparsified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError

FULL_RANK = None  # rank value meaning "unfactored dense tensor"


@dataclass(frozen=True)
class SparsityPlan:
    """Ranks (None = full) and density fractions in (0, 1] for W-side and U-side tensors."""

    r_w: int | None = FULL_RANK
    r_u: int | None = FULL_RANK
    s_w: float = 1.0
    s_u: float = 1.0

    def validate(self, d_in: int, d_hidden: int) -> None:
        for name, s in (("s_w", self.s_w), ("s_u", self.s_u)):
            if not 0.0 < s <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {s}")
        if self.r_w is not None and not 1 <= self.r_w <= min(d_in, d_hidden):
            raise ValueError(f"r_w must lie in [1, {min(d_in, d_hidden)}], got {self.r_w}")
        if self.r_u is not None and not 1 <= self.r_u <= d_hidden:
            raise ValueError(f"r_u must lie in [1, {d_hidden}], got {self.r_u}")

    def fraction_for(self, tensor_name: str) -> float:
        if tensor_name.startswith("W"):
            return self.s_w
        if tensor_name.startswith("U"):
            return self.s_u
        raise ValueError(f"no sparsity fraction for tensor {tensor_name!r}")

    def budget_for(self, tensor_name: str, shape: tuple[int, ...]) -> int:
        """Nonzero budget: ceil(fraction * numel), at least 1."""
        numel = int(np.prod(shape))
        return max(1, math.ceil(self.fraction_for(tensor_name) * numel))

    def is_identity(self) -> bool:
        return self.s_w >= 1.0 and self.s_u >= 1.0


def hard_threshold(m: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep the k largest-magnitude entries of m, zero the rest.

    Ties are broken by row-major index order (earlier index kept). Returns
    (thresholded copy, boolean mask). Kept entries are preserved bit-exactly.
    """
    if not 0 < k <= m.size:
        raise ValueError(f"k must lie in [1, {m.size}], got {k}")
    flat = np.abs(m).ravel()
    # Stable sort on descending magnitude keeps earlier flat indices first among ties.
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(m.size, dtype=bool)
    mask[order[:k]] = True
    mask = mask.reshape(m.shape)
    out = np.where(mask, m, 0.0)
    return out, mask


def compose_lowrank(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Compose a factored matrix: a (m x r) times b (n x r) transposed -> (m x n)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"compose_lowrank: incompatible factor shapes {a.shape}, {b.shape}")
    return a @ b.T


def factor_init(dense: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Split a dense (m x n) init into rank-r factors via truncated SVD.

    Returns (A, B) with A (m x r), B (n x r) and A B^T the best rank-r
    approximation of the input; singular values are split evenly so both
    factors start at comparable scale.
    """
    if not 1 <= r <= min(dense.shape):
        raise ValueError(f"rank must lie in [1, {min(dense.shape)}], got {r}")
    u, s, vt = np.linalg.svd(dense, full_matrices=False)
    root = np.sqrt(s[:r])
    return np.ascontiguousarray(u[:, :r] * root), np.ascontiguousarray(vt[:r, :].T * root)


def project_params(params, plan: SparsityPlan) -> dict[str, np.ndarray]:
    """Hard-threshold every sparsifiable tensor of a cell to its plan budget, in place.

    Returns the support masks keyed like the cell's sparse tensors. With
    fractions at 1.0 this is the identity projection (all-true masks).
    """
    masks: dict[str, np.ndarray] = {}
    tensors = params.tensors()
    for name in params.sparse_tensor_names():
        t = tensors[name]
        k = plan.budget_for(name, t.shape)
        out, mask = hard_threshold(t, k)
        t[...] = out
        masks[name] = mask
    return masks


def apply_mask(tensor: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero entries outside the mask (returns a new array)."""
    if tensor.shape != mask.shape:
        raise ShapeError(f"apply_mask: shape mismatch {tensor.shape} vs {mask.shape}")
    return np.where(mask, tensor, 0.0)


def mask_params_inplace(params, masks: dict[str, np.ndarray]) -> None:
    tensors = params.tensors()
    for name, mask in masks.items():
        t = tensors[name]
        t[...] = np.where(mask, t, 0.0)


def mask_grads_inplace(grads: dict[str, np.ndarray], masks: dict[str, np.ndarray]) -> None:
    for name, mask in masks.items():
        if name in grads:
            g = grads[name]
            g[...] = np.where(mask, g, 0.0)


def nnz_counts(params, names=None) -> dict[str, int]:
    """Actual nonzero count per sparse tensor (diagnostic for history records)."""
    tensors = params.tensors()
    names = params.sparse_tensor_names() if names is None else names
    return {name: int(np.count_nonzero(tensors[name])) for name in names}
