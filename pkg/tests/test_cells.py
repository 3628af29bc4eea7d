"""Cell steps against scalar-loop oracles written from the update rules.

The oracles use math.* per coordinate and know nothing about the batched
implementations; agreement is required to near machine precision.
"""

import math

import numpy as np
import pytest

from fastgrnn import rng
from fastgrnn.cells import (
    RAW_CLAMP,
    FastGrnnParams,
    FastRnnParams,
    RnnParams,
    VectorFastRnnParams,
    clamped_logit,
    init_fastgrnn,
    init_fastrnn,
    init_rnn,
    init_vector_fastrnn,
    raw_scalar,
)
from fastgrnn.linalg import ShapeError

TOL = 1e-12


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def _dot_row(M, v):
    return [sum(M[i][j] * v[j] for j in range(len(v))) for i in range(len(M))]


def rnn_oracle(p, x, h):
    a = _dot_row(p.W, x)
    r = _dot_row(p.U, h)
    return [math.tanh(a[i] + r[i] + p.b[i]) for i in range(len(h))]


def fastrnn_oracle(p, x, h):
    al, be = _sig(float(p.alpha_raw)), _sig(float(p.beta_raw))
    a = _dot_row(p.W, x)
    r = _dot_row(p.U, h)
    return [al * math.tanh(a[i] + r[i] + p.b[i]) + be * h[i] for i in range(len(h))]


def fastgrnn_oracle(p, x, h):
    W, U = p.effective_weights()
    ze, nu = _sig(float(p.zeta_raw)), _sig(float(p.nu_raw))
    a = _dot_row(W, x)
    r = _dot_row(U, h)
    out = []
    for i in range(len(h)):
        s = a[i] + r[i]
        z = _sig(s + p.b_z[i])
        c = math.tanh(s + p.b_h[i])
        out.append((ze * (1.0 - z) + nu) * c + z * h[i])
    return out


def vector_fastrnn_oracle(p, x, h):
    ze, nu = _sig(float(p.zeta_raw)), _sig(float(p.nu_raw))
    a = _dot_row(p.W, x)
    r = _dot_row(p.U, h)
    out = []
    for i in range(len(h)):
        al = _sig(p.alpha_raw[i])
        be = ze * (1.0 - al) + nu
        out.append(al * math.tanh(a[i] + r[i] + p.b[i]) + be * h[i])
    return out


def _rand_xh(gen, d_in, d_hidden, batch=3):
    return gen.normal(size=(batch, d_in)), gen.normal(size=(batch, d_hidden))


def test_rnn_step_matches_scalar_oracle():
    gen = rng.stream(0, rng.PROBE)
    p = init_rnn(3, 5, gen)
    x, h = _rand_xh(gen, 3, 5)
    got, _ = p.step_batch(x, h)
    for i in range(x.shape[0]):
        want = rnn_oracle(p, x[i], h[i])
        assert np.max(np.abs(got[i] - want)) < TOL


def test_fastrnn_step_matches_scalar_oracle():
    gen = rng.stream(1, rng.PROBE)
    p = init_fastrnn(4, 6, horizon=12, rng=gen)
    x, h = _rand_xh(gen, 4, 6)
    got, _, h_tilde = p.step_batch(x, h)
    for i in range(x.shape[0]):
        want = fastrnn_oracle(p, x[i], h[i])
        assert np.max(np.abs(got[i] - want)) < TOL
    assert np.all(np.abs(h_tilde) <= 1.0)


@pytest.mark.parametrize("ranks", [(None, None), (2, 3)])
def test_fastgrnn_step_matches_scalar_oracle(ranks):
    gen = rng.stream(2, rng.PROBE)
    p = init_fastgrnn(4, 6, gen, r_w=ranks[0], r_u=ranks[1])
    x, h = _rand_xh(gen, 4, 6)
    got, _, z, c = p.step_batch(x, h)
    for i in range(x.shape[0]):
        want = fastgrnn_oracle(p, x[i], h[i])
        assert np.max(np.abs(got[i] - want)) < TOL
    assert np.all((z > 0) & (z < 1))
    assert np.all(np.abs(c) <= 1.0)


def test_vector_fastrnn_step_matches_scalar_oracle():
    gen = rng.stream(3, rng.PROBE)
    p = init_vector_fastrnn(4, 6, horizon=12, rng=gen)
    x, h = _rand_xh(gen, 4, 6)
    got, _, _ = p.step_batch(x, h)
    for i in range(x.shape[0]):
        want = vector_fastrnn_oracle(p, x[i], h[i])
        assert np.max(np.abs(got[i] - want)) < TOL


def test_fastrnn_init_targets_horizon_scaling():
    gen = rng.stream(4, rng.PROBE)
    for T in (2, 10, 200):
        p = init_fastrnn(3, 4, horizon=T, rng=gen)
        a0 = 1.0 / max(T, 2)
        assert abs(p.alpha() - a0) < 1e-9
        assert abs(p.beta() - (1.0 - 1.0 / T)) < 1e-9 or T == 2


def test_fastgrnn_init_gate_constants():
    gen = rng.stream(5, rng.PROBE)
    p = init_fastgrnn(3, 4, gen)
    assert abs(p.zeta() - _sig(1.0)) < 1e-15
    assert abs(p.nu() - _sig(-4.0)) < 1e-15


def test_clamped_logit_round_trips_and_clamps():
    for v in (0.1, 0.5, 0.9):
        assert abs(_sig(clamped_logit(v)) - v) < 1e-12
    assert clamped_logit(1.0 - 1e-15) == RAW_CLAMP
    assert clamped_logit(1e-15) == -RAW_CLAMP


def test_tensors_cover_trainable_state():
    gen = rng.stream(6, rng.PROBE)
    assert set(init_rnn(3, 4, gen).tensors()) == {"W", "U", "b"}
    assert set(init_fastrnn(3, 4, 10, gen).tensors()) == {"W", "U", "b", "alpha_raw", "beta_raw"}
    assert set(init_fastgrnn(3, 4, gen).tensors()) == {"W", "U", "b_z", "b_h", "zeta_raw", "nu_raw"}
    assert set(init_fastgrnn(3, 4, gen, r_w=2, r_u=2).tensors()) == {
        "W1", "W2", "U1", "U2", "b_z", "b_h", "zeta_raw", "nu_raw",
    }
    assert set(init_vector_fastrnn(3, 4, 10, gen).tensors()) == {
        "W", "U", "b", "alpha_raw", "zeta_raw", "nu_raw",
    }


def test_factored_dims_and_effective_weights():
    gen = rng.stream(7, rng.PROBE)
    p = init_fastgrnn(5, 8, gen, r_w=2, r_u=3)
    assert p.d_in == 5 and p.d_hidden == 8
    W, U = p.effective_weights()
    assert W.shape == (8, 5) and U.shape == (8, 8)
    assert np.allclose(W, p.W1 @ p.W2.T)
    assert np.allclose(U, p.U1 @ p.U2.T)


def test_step_rejects_wrong_dims():
    gen = rng.stream(8, rng.PROBE)
    p = init_rnn(3, 4, gen)
    with pytest.raises(ShapeError):
        p.step_batch(np.zeros((2, 5)), np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        p.step_batch(np.zeros((2, 3)), np.zeros((2, 6)))


def test_gate_nonlin_validation():
    with pytest.raises(ValueError):
        FastGrnnParams(
            W1=np.zeros((2, 2)),
            U1=np.zeros((2, 2)),
            b_z=np.zeros(2),
            b_h=np.zeros(2),
            gate_nonlin="softmax",
        )


def test_raw_scalar_is_mutable_storage():
    r = raw_scalar(1.5)
    assert r.shape == () and r.dtype == np.float64
    r += 1.0
    assert float(r) == 2.5
