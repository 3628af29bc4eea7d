"""Fixed-point kernels: rounding and rescale identities, per-architecture
divergence bounds between the integer path and the float reference, and
the structural no-float guarantee.

The divergence bounds were measured over 30 random models per
architecture with inputs drawn from the Q1.14 contract range and then
frozen: the single-tensor cells stay within 2^-7; the factored/gated and
ungated cells within 2^-6 (two int8 factors carry roughly double the
quantization error of one tensor).
"""

import numpy as np
import pytest

from fastgrnn import rng
from fastgrnn.bptt import forward_batch, init_softmax_head
from fastgrnn.cells import (
    init_fastgrnn,
    init_fastrnn,
    init_rnn,
    init_vector_fastrnn,
)
from fastgrnn.compression import SparsityPlan, project_params
from fastgrnn.data import NormStats
from fastgrnn.quantize import (
    INT8_MAX,
    MAX_FACTOR_RANK,
    Q_ONE,
    apply_rescale,
    hard_sigmoid_int,
    hard_tanh_int,
    integer_forward,
    q14_mul,
    quantize_input,
    quantize_model,
    quantize_tensor,
    rescale_params,
    round_half_away,
    to_q14,
)
from fastgrnn.linalg import hard_sigmoid, hard_tanh

DIVERGENCE_BOUND = {
    "rnn": 2.0**-6,
    "fastrnn": 2.0**-7,
    "fastrnn-vec": 2.0**-7,
    "fastgrnn": 2.0**-6,
    "fastgrnn-factored": 2.0**-6,
}


def _hard_cell(arch, gen, d_in=6, d_hidden=10, horizon=8):
    if arch == "rnn":
        return init_rnn(d_in, d_hidden, gen, nonlin="hard_tanh")
    if arch == "fastrnn":
        return init_fastrnn(d_in, d_hidden, horizon, gen, nonlin="hard_tanh")
    if arch == "fastrnn-vec":
        return init_vector_fastrnn(d_in, d_hidden, horizon, gen, nonlin="hard_tanh")
    if arch == "fastgrnn":
        return init_fastgrnn(d_in, d_hidden, gen, gate_nonlin="hard_sigmoid", update_nonlin="hard_tanh")
    return init_fastgrnn(d_in, d_hidden, gen, r_w=3, r_u=4,
                         gate_nonlin="hard_sigmoid", update_nonlin="hard_tanh")


def _identity_stats(d):
    return NormStats(mean=np.zeros(d), std=np.ones(d))


def test_round_half_away_known_values():
    x = np.array([0.5, -0.5, 1.4, -1.6, 2.5, -2.5, 0.0])
    want = np.array([1.0, -1.0, 1.0, -2.0, 3.0, -3.0, 0.0])
    assert np.array_equal(round_half_away(x), want)


def test_quantize_tensor_round_trip_error_bound():
    gen = rng.stream(0, rng.PROBE)
    for _ in range(5):
        m = gen.normal(size=(7, 5))
        q, scale = quantize_tensor(m)
        assert q.dtype == np.int8
        assert np.max(np.abs(q)) <= INT8_MAX
        assert scale == np.float32(scale)  # stored precision == working precision
        back = q.astype(np.float64) * scale
        assert np.max(np.abs(back - m)) <= scale / 2 + 1e-12


def test_quantize_tensor_peak_maps_to_127():
    m = np.array([[0.5, -1.0], [0.25, 0.0]])
    q, scale = quantize_tensor(m)
    assert np.min(q) == -127
    assert abs(scale - np.float32(1.0 / 127)) < 1e-12


def test_quantize_tensor_all_zero_uses_unit_scale():
    q, scale = quantize_tensor(np.zeros((3, 3)))
    assert scale == 1.0
    assert np.all(q == 0)


def test_rescale_approximates_float_multiply():
    gen = rng.stream(1, rng.PROBE)
    for scale in (0.00123, 0.031, 0.5, 0.9999):
        mult, shift = rescale_params(scale)
        acc = gen.integers(-(2**22), 2**22, size=1000, dtype=np.int64)
        got = apply_rescale(acc, mult, shift)
        want = np.round(acc.astype(np.float64) * scale)
        assert np.max(np.abs(got - want)) <= 1.0, scale


def test_rescale_handles_scales_above_one():
    mult, shift = rescale_params(3.0)
    acc = np.array([100, -41, 7], dtype=np.int64)
    assert np.array_equal(apply_rescale(acc, mult, shift), [300, -123, 21])


def test_rescale_rejects_unfoldable_scales():
    with pytest.raises(ValueError):
        rescale_params(0.0)
    with pytest.raises(ValueError):
        rescale_params(2.0**40)


def test_hard_nonlin_int_matches_float_reference_on_grid():
    v = np.arange(-3 * Q_ONE, 3 * Q_ONE + 1, 37, dtype=np.int32)
    x = v.astype(np.float64) / Q_ONE
    got_t = hard_tanh_int(v).astype(np.float64) / Q_ONE
    got_s = hard_sigmoid_int(v).astype(np.float64) / Q_ONE
    assert np.max(np.abs(got_t - hard_tanh(x))) == 0.0
    assert np.max(np.abs(got_s - hard_sigmoid(x))) <= 2.0**-15


def test_q14_mul_rounds_products():
    a = np.array([Q_ONE, Q_ONE // 2, -Q_ONE], dtype=np.int32)
    b = np.array([Q_ONE // 2, Q_ONE // 2, Q_ONE // 4], dtype=np.int32)
    got = q14_mul(a, b)
    want = np.array([Q_ONE // 2, Q_ONE // 4, -Q_ONE // 4])
    assert np.array_equal(got, want)


def test_to_q14_saturates_nothing_in_contract_range():
    x = np.array([-1.9999, -1.0, 0.0, 0.5, 1.9999])
    q = to_q14(x)
    assert q.dtype == np.int16
    assert np.max(np.abs(q.astype(np.float64) / Q_ONE - x)) <= 2.0**-15


def test_quantize_input_zscores_rounds_and_clips():
    stats = NormStats(mean=np.array([1.0, 0.0]), std=np.array([2.0, 1.0]))
    X = np.array([[[3.0, 0.25], [1.0, 99.0]]])
    q = quantize_input(X, stats)
    assert q.dtype == np.int16
    assert q[0, 0, 0] == Q_ONE  # (3-1)/2 = 1.0
    assert q[0, 0, 1] == Q_ONE // 4
    assert q[0, 1, 0] == 0
    assert q[0, 1, 1] == 32767  # saturated


@pytest.mark.parametrize("arch", sorted(DIVERGENCE_BOUND))
def test_integer_path_tracks_float_reference(arch):
    bound = DIVERGENCE_BOUND[arch]
    worst = 0.0
    for seed in range(5):
        gen = rng.stream(100 + seed, rng.PROBE)
        cell = _hard_cell(arch, gen)
        head = init_softmax_head(10, 3, gen)
        qm = quantize_model(cell, head, _identity_stats(6), horizon=8)
        X = gen.uniform(-1.5, 1.5, size=(4, 8, 6))
        Xq = quantize_input(X, _identity_stats(6))
        # The float reference runs on the dequantized weights the integer
        # path actually uses, isolating arithmetic error from weight error.
        _, _, states = integer_forward(qm, Xq, return_states=True)
        trace = forward_batch(cell, Xq.astype(np.float64) / Q_ONE)
        div = np.max(np.abs(states.astype(np.float64) / Q_ONE - trace.H[:, 1:, :]))
        worst = max(worst, div)
    assert worst <= bound, f"{arch}: divergence {worst} above {bound}"


def test_integer_forward_is_float_free():
    gen = rng.stream(200, rng.PROBE)
    cell = _hard_cell("fastgrnn-factored", gen)
    head = init_softmax_head(10, 3, gen)
    qm = quantize_model(cell, head, _identity_stats(6), horizon=8)
    Xq = quantize_input(gen.uniform(-1, 1, size=(2, 8, 6)), _identity_stats(6))
    audit: list = []
    logits, pred = integer_forward(qm, Xq, audit=audit)
    assert logits.dtype == np.int32
    assert pred.dtype == np.int64
    assert audit, "audit hook saw no intermediates"
    for dtype in audit:
        assert np.issubdtype(dtype, np.integer), f"float intermediate: {dtype}"


def test_integer_forward_rejects_float_input():
    gen = rng.stream(201, rng.PROBE)
    cell = _hard_cell("fastrnn", gen)
    head = init_softmax_head(10, 2, gen)
    qm = quantize_model(cell, head, _identity_stats(6), horizon=8)
    with pytest.raises(ValueError, match="int16"):
        integer_forward(qm, np.zeros((1, 8, 6)))


def test_quantize_model_rejects_smooth_nonlinearities():
    gen = rng.stream(202, rng.PROBE)
    cell = init_fastrnn(4, 6, 8, gen, nonlin="tanh")
    head = init_softmax_head(6, 2, gen)
    with pytest.raises(ValueError, match="hard"):
        quantize_model(cell, head, _identity_stats(4), horizon=8)


def test_quantize_model_rejects_off_mask_values():
    gen = rng.stream(203, rng.PROBE)
    cell = _hard_cell("fastrnn", gen)
    head = init_softmax_head(10, 2, gen)
    mask = np.zeros_like(cell.W, dtype=bool)
    mask[0, 0] = True
    with pytest.raises(ValueError, match="outside its mask"):
        quantize_model(cell, head, _identity_stats(6), horizon=8, masks={"W": mask})


def test_quantize_model_rejects_oversized_factor_rank():
    gen = rng.stream(204, rng.PROBE)
    cell = init_fastgrnn(200, 200, gen, r_w=MAX_FACTOR_RANK + 1,
                         gate_nonlin="hard_sigmoid", update_nonlin="hard_tanh")
    head = init_softmax_head(200, 2, gen)
    with pytest.raises(ValueError, match="rank"):
        quantize_model(cell, head, _identity_stats(200), horizon=8)


def test_quantized_model_respects_masks():
    gen = rng.stream(205, rng.PROBE)
    cell = _hard_cell("fastgrnn-factored", gen)
    plan = SparsityPlan(r_w=3, r_u=4, s_w=0.5, s_u=0.5)
    masks = project_params(cell, plan)
    head = init_softmax_head(10, 3, gen)
    qm = quantize_model(cell, head, _identity_stats(6), horizon=8, masks=masks)
    for name, mask in masks.items():
        assert np.all(qm.weights[name].q[~mask] == 0)
        assert qm.weights[name].nnz() <= int(mask.sum())
