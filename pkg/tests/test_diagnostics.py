"""Conditioning analysis: the propagation product, its condition-number
bound, gradient-norm spectra, and the alpha/beta study records.

The reference for build_M is a frozen scalar-loop construction: each
per-step factor is assembled entry by entry and the product is taken
with an explicit triple loop, sharing no code with the module under
test.
"""

import math

import numpy as np
import pytest

from fastgrnn import rng
from fastgrnn.bptt import forward_batch, init_softmax_head
from fastgrnn.cells import clamped_logit, init_fastrnn, raw_scalar
from fastgrnn.diagnostics import (
    AlphaBetaRecord,
    ConditioningReport,
    alpha_beta_record,
    alpha_beta_study,
    build_M,
    condition_bound,
    conditioning_report,
    empirical_condition,
    factor_norms,
    gradient_norm_spectrum,
    hard_sigmoid_trace_diagonals,
    reports_from_text,
    reports_to_text,
    spectrum_ratio,
)
from fastgrnn.linalg import ShapeError


def build_M_oracle(U, D_list, alpha, beta, t=0):
    """Entry-by-entry factors, triple-loop products, left to right."""
    U = np.asarray(U, dtype=np.float64)
    D_list = np.atleast_2d(np.asarray(D_list, dtype=np.float64))
    n = U.shape[0]
    M = [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
    for k in range(t, D_list.shape[0]):
        F = [
            [alpha * U[j][i] * D_list[k][j] + (beta if i == j else 0.0) for j in range(n)]
            for i in range(n)
        ]
        P = [[0.0] * n for _ in range(n)]
        for i in range(n):
            for j in range(n):
                acc = 0.0
                for m in range(n):
                    acc += M[i][m] * F[m][j]
                P[i][j] = acc
        M = P
    return np.array(M)


def test_build_M_matches_scalar_oracle():
    gen = rng.stream(0, rng.PROBE)
    for trial in range(5):
        n, T = 4, 6
        U = gen.normal(size=(n, n))
        D = gen.uniform(0.0, 1.0, size=(T, n))
        a, b = 0.3, 0.8
        for t in (0, 2, T):
            got = build_M(U, D, a, b, t=t)
            want = build_M_oracle(U, D, a, b, t=t)
            assert np.allclose(got, want, rtol=1e-12, atol=1e-14)


def test_build_M_at_t_equal_T_is_identity():
    gen = rng.stream(1, rng.PROBE)
    U = gen.normal(size=(3, 3))
    D = gen.uniform(size=(5, 3))
    assert np.array_equal(build_M(U, D, 0.5, 0.5, t=5), np.eye(3))


def test_build_M_shape_errors():
    gen = rng.stream(2, rng.PROBE)
    D = gen.uniform(size=(4, 3))
    with pytest.raises(ShapeError):
        build_M(gen.normal(size=(3, 2)), D, 0.1, 0.9)
    with pytest.raises(ShapeError):
        build_M(gen.normal(size=(4, 4)), D, 0.1, 0.9)
    U = gen.normal(size=(3, 3))
    with pytest.raises(ShapeError):
        build_M(U, D, 0.1, 0.9, t=5)
    with pytest.raises(ShapeError):
        build_M(U, D, 0.1, 0.9, t=-1)


def test_factor_norms_match_svd():
    gen = rng.stream(3, rng.PROBE)
    U = gen.normal(size=(5, 5))
    D = gen.uniform(size=(3, 5))
    got = factor_norms(U, D)
    for k in range(3):
        want = np.linalg.svd(U.T * D[k], compute_uv=False)[0]
        assert got[k] == pytest.approx(want, rel=1e-8)
    assert factor_norms(U, D, t=3).size == 0


def test_alpha_zero_gives_unit_kappa_and_unit_bound():
    # The product collapses to beta^steps * I, whose singular values are
    # all equal, so kappa must be exactly 1 even though M is not I.
    gen = rng.stream(4, rng.PROBE)
    U = gen.normal(size=(6, 6)) * 10.0
    D = gen.uniform(size=(10, 6))
    M = build_M(U, D, 0.0, 0.9)
    assert np.array_equal(M * (1 - np.eye(6)), np.zeros((6, 6)))
    diag = np.diag(M)
    assert np.all(diag == diag[0])
    assert diag[0] == pytest.approx(0.9**10, rel=1e-12)
    assert empirical_condition(M) == 1.0
    assert condition_bound(U, D, 0.0, 0.9) == 1.0


def test_condition_bound_formula_and_vacuous_case():
    gen = rng.stream(5, rng.PROBE)
    U = gen.normal(size=(4, 4))
    D = gen.uniform(size=(7, 4))
    a, b = 0.05, 0.95
    x = (a / b) * float(np.max(factor_norms(U, D)))
    assert x < 1.0
    assert condition_bound(U, D, a, b) == pytest.approx(((1 + x) / (1 - x)) ** 7, rel=1e-12)
    # Pushing alpha/beta past the contraction threshold voids the bound.
    assert condition_bound(U * 100.0, D, 0.9, 0.1) == math.inf
    with pytest.raises(ValueError):
        condition_bound(U, D, 0.1, 0.0)
    assert condition_bound(U, D, 0.5, 0.5, t=7) == 1.0


def test_empirical_condition_known_matrix_and_underflow():
    assert empirical_condition(np.diag([4.0, 2.0, 1.0])) == pytest.approx(4.0)
    assert empirical_condition(np.diag([1.0, 1e-310])) == math.inf


def test_kappa_respects_bound_on_hard_sigmoid_traces():
    # The recipe alpha = 1/(T m), beta = 1 - alpha keeps the bound finite;
    # the measured kappa must then sit at or below it.
    for key in range(8):
        T, dh = 20, 8
        D = hard_sigmoid_trace_diagonals(dh, T, key)
        gen = rng.stream(key, rng.PROBE, 1)
        U = gen.normal(size=(dh, dh))
        U *= 1.2 / np.linalg.svd(U, compute_uv=False)[0]
        m = float(np.max(factor_norms(U, D))) or 1.0
        a = 1.0 / (T * m)
        rep = conditioning_report(U, D, a, 1.0 - a)
        assert not rep.vacuous()
        assert rep.kappa <= rep.bound * (1 + 1e-9)


def test_hard_sigmoid_trace_diagonals_support_and_determinism():
    D = hard_sigmoid_trace_diagonals(6, 9, key=3)
    assert D.shape == (9, 6)
    assert set(np.unique(D)) <= {0.0, 0.5}
    assert np.array_equal(D, hard_sigmoid_trace_diagonals(6, 9, key=3))
    assert not np.array_equal(D, hard_sigmoid_trace_diagonals(6, 9, key=4))


def test_conditioning_report_fields_and_vacuous_flag():
    gen = rng.stream(6, rng.PROBE)
    U = gen.normal(size=(3, 3))
    D = gen.uniform(size=(4, 3))
    rep = conditioning_report(U, D, 0.1, 0.9, grad_norms=[1.0, 2.0])
    assert rep.horizon == 4 and rep.start == 0
    assert len(rep.factor_norms) == 4
    assert rep.grad_norms == [1.0, 2.0]
    assert rep.vacuous() == (not math.isfinite(rep.bound))
    vac = conditioning_report(U * 1e3, D, 0.99, 0.01)
    assert vac.vacuous()


def test_gradient_norm_spectrum_length_and_positivity():
    gen = rng.stream(7, rng.PROBE)
    T, d, dh = 12, 3, 5
    cell = init_fastrnn(d, dh, T, gen)
    head = init_softmax_head(dh, 2, gen)
    X = gen.normal(size=(1, T, d))
    norms = gradient_norm_spectrum(forward_batch(cell, X), head, label=1)
    assert norms.shape == (T,)
    assert np.all(norms > 0)


def test_spectrum_ratio():
    assert spectrum_ratio(np.array([1.0, 2.0, 8.0])) == 8.0
    assert spectrum_ratio(np.array([5.0])) == 1.0
    assert spectrum_ratio(np.array([1.0, 0.0])) == math.inf


def test_alpha_beta_record_arithmetic():
    gen = rng.stream(8, rng.PROBE)
    cell = init_fastrnn(3, 4, 10, gen)
    cell.alpha_raw = raw_scalar(clamped_logit(0.2))
    cell.beta_raw = raw_scalar(clamped_logit(0.7))
    rec = alpha_beta_record("delayed_recall", 10, 1, cell, 0.95)
    assert rec.alpha == pytest.approx(0.2, rel=1e-9)
    assert rec.beta == pytest.approx(0.7, rel=1e-9)
    assert rec.ratio == pytest.approx(0.2 / 0.7, rel=1e-9)
    assert rec.rel_err == pytest.approx(abs(0.7 - 0.8) / 0.7, rel=1e-6)
    assert rec.val_metric == 0.95
    assert not rec.diverged


def test_alpha_beta_study_orders_records_and_absorbs_divergence():
    gen = rng.stream(9, rng.PROBE)
    cell = init_fastrnn(3, 4, 10, gen)

    def fake_train(T, seed):
        if (T, seed) == (20, 1):
            raise ArithmeticError("blew up")
        return cell, float(T + seed)

    recs = alpha_beta_study([10, 20], seeds=(0, 1), train=fake_train)
    assert [(r.horizon, r.seed) for r in recs] == [(10, 0), (10, 1), (20, 0), (20, 1)]
    bad = recs[3]
    assert bad.diverged and math.isnan(bad.alpha) and math.isnan(bad.val_metric)
    assert recs[2].val_metric == 20.0 and not recs[2].diverged
    with pytest.raises(ValueError):
        alpha_beta_study([10])


def test_reports_roundtrip_through_text(tmp_path):
    gen = rng.stream(10, rng.PROBE)
    U = gen.normal(size=(3, 3))
    D = gen.uniform(size=(4, 3))
    reps = [
        conditioning_report(U, D, 0.1, 0.9, grad_norms=[0.25, 1.0 / 3.0]),
        conditioning_report(U, D, 0.0, 0.8),
    ]
    path = tmp_path / "cond.tsv"
    text = reports_to_text(reps, path)
    assert path.read_text() == text
    back = reports_from_text(text, ConditioningReport)
    assert back == reps

    recs = [
        AlphaBetaRecord("delayed_recall", 50, 0, 0.02, 0.98, 0.02 / 0.98, 0.001, 1.0),
        AlphaBetaRecord(
            "delayed_recall", 50, 1, math.nan, math.nan, math.nan, math.nan, math.nan, True
        ),
    ]
    back = reports_from_text(reports_to_text(recs), AlphaBetaRecord)
    assert back[0] == recs[0]
    assert back[1].diverged and math.isnan(back[1].alpha)
    with pytest.raises(ValueError):
        reports_to_text([])
