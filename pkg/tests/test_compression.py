"""Thresholding and factorization against sort-based and SVD oracles."""

import math

import numpy as np
import pytest

from fastgrnn import rng
from fastgrnn.cells import init_fastgrnn, init_fastrnn
from fastgrnn.compression import (
    SparsityPlan,
    apply_mask,
    compose_lowrank,
    factor_init,
    hard_threshold,
    mask_grads_inplace,
    mask_params_inplace,
    nnz_counts,
    project_params,
)


def threshold_oracle(m, k):
    # Keep the k largest magnitudes; python sort, independent of the
    # argsort-based implementation.
    flat = [(abs(v), i) for i, v in enumerate(m.reshape(-1))]
    flat.sort(key=lambda p: (-p[0], p[1]))
    keep = {i for _, i in flat[:k]}
    out = np.zeros_like(m).reshape(-1)
    src = m.reshape(-1)
    for i in keep:
        out[i] = src[i]
    return out.reshape(m.shape)


def test_budget_is_exact_ceiling():
    plan = SparsityPlan(s_w=0.2, s_u=0.3)
    assert plan.budget_for("W", (47, 1)) == math.ceil(0.2 * 47)
    assert plan.budget_for("U", (80, 5)) == math.ceil(0.3 * 400)
    assert SparsityPlan().budget_for("W", (2, 5)) == 10
    assert SparsityPlan(s_w=0.001).budget_for("W1", (2, 5)) == 1  # floor of one nonzero
    with pytest.raises(ValueError):
        plan.budget_for("b", (4,))


def test_hard_threshold_matches_sort_oracle():
    gen = rng.stream(0, rng.PROBE)
    for shape, k in (((6, 7), 5), ((3, 3), 9), ((10, 2), 1)):
        m = gen.normal(size=shape)
        got, mask = hard_threshold(m, k)
        want = threshold_oracle(m, k)
        assert np.array_equal(got, want)
        assert mask.dtype == np.bool_
        assert int(mask.sum()) == k
        # Kept entries are bit-exact copies.
        assert np.array_equal(got[mask], m[mask])
        assert np.all(got[~mask] == 0.0)


def test_hard_threshold_is_deterministic_under_ties():
    m = np.array([[1.0, -1.0, 1.0], [0.5, -1.0, 0.25]])
    a, mask_a = hard_threshold(m, 2)
    b, mask_b = hard_threshold(m.copy(), 2)
    assert np.array_equal(a, b)
    assert np.array_equal(mask_a, mask_b)
    assert int(mask_a.sum()) == 2
    # Projecting a projected matrix is a no-op.
    c, mask_c = hard_threshold(a, 2)
    assert np.array_equal(a, c)
    assert np.array_equal(mask_a, mask_c)


def test_hard_threshold_validates_budget():
    with pytest.raises(ValueError):
        hard_threshold(np.ones((2, 2)), 0)
    with pytest.raises(ValueError):
        hard_threshold(np.ones((2, 2)), 5)


def test_compose_lowrank_is_a_bt():
    gen = rng.stream(1, rng.PROBE)
    a = gen.normal(size=(5, 2))
    b = gen.normal(size=(4, 2))
    assert np.allclose(compose_lowrank(a, b), a @ b.T, atol=1e-15)


def test_factor_init_matches_truncated_svd():
    gen = rng.stream(2, rng.PROBE)
    m = gen.normal(size=(6, 4))
    r = 2
    w1, w2 = factor_init(m, r)
    assert w1.shape == (6, r) and w2.shape == (4, r)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    best = u[:, :r] @ np.diag(s[:r]) @ vt[:r]
    assert np.max(np.abs(compose_lowrank(w1, w2) - best)) < 1e-10


def test_factor_init_full_rank_reconstructs():
    gen = rng.stream(3, rng.PROBE)
    m = gen.normal(size=(4, 4))
    w1, w2 = factor_init(m, 4)
    assert np.max(np.abs(compose_lowrank(w1, w2) - m)) < 1e-12


def test_project_params_hits_every_budget():
    gen = rng.stream(4, rng.PROBE)
    cell = init_fastgrnn(9, 16, gen, r_w=3, r_u=4)
    plan = SparsityPlan(r_w=3, r_u=4, s_w=0.2, s_u=0.3)
    masks = project_params(cell, plan)
    assert set(masks) == {"W1", "W2", "U1", "U2"}
    for name, mask in masks.items():
        t = cell.tensors()[name]
        want = plan.budget_for(name, t.shape)
        assert int(np.count_nonzero(t)) == want
        assert int(mask.sum()) == want
        assert np.all(t[~mask] == 0.0)


def test_project_params_dense_plan_is_identity():
    gen = rng.stream(5, rng.PROBE)
    cell = init_fastrnn(4, 6, 10, gen)
    before = cell.W.copy()
    masks = project_params(cell, SparsityPlan())
    assert np.array_equal(cell.W, before)
    assert all(bool(m.all()) for m in masks.values())


def test_mask_application_zeroes_off_support_only():
    gen = rng.stream(6, rng.PROBE)
    t = gen.normal(size=(4, 5))
    mask = gen.uniform(size=(4, 5)) > 0.5
    out = apply_mask(t, mask)
    assert np.array_equal(out[mask], t[mask])
    assert np.all(out[~mask] == 0.0)


def test_mask_inplace_helpers():
    gen = rng.stream(7, rng.PROBE)
    cell = init_fastrnn(3, 4, 10, gen)
    mask = gen.uniform(size=cell.W.shape) > 0.5
    mask_params_inplace(cell, {"W": mask})
    assert np.all(cell.W[~mask] == 0.0)
    grads = {"W": gen.normal(size=cell.W.shape), "b": gen.normal(size=4)}
    before_b = grads["b"].copy()
    mask_grads_inplace(grads, {"W": mask})
    assert np.all(grads["W"][~mask] == 0.0)
    assert np.array_equal(grads["b"], before_b)


def test_nnz_counts_reports_sparse_tensors():
    gen = rng.stream(8, rng.PROBE)
    cell = init_fastgrnn(6, 8, gen, r_w=2, r_u=2)
    plan = SparsityPlan(r_w=2, r_u=2, s_w=0.5, s_u=0.5)
    project_params(cell, plan)
    counts = nnz_counts(cell)
    for name, n in counts.items():
        assert n == int(np.count_nonzero(cell.tensors()[name]))


def test_plan_validation():
    with pytest.raises(ValueError):
        SparsityPlan(s_w=0.0).validate(4, 8)
    with pytest.raises(ValueError):
        SparsityPlan(s_w=1.2).validate(4, 8)
    with pytest.raises(ValueError):
        SparsityPlan(r_w=5).validate(4, 8)  # r_w > min(d_in, d_hidden)
    with pytest.raises(ValueError):
        SparsityPlan(r_u=9).validate(4, 8)
    SparsityPlan(r_w=4, r_u=8, s_w=0.1, s_u=0.1).validate(4, 8)
