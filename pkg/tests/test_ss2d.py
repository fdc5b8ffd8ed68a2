import numpy as np
import pytest

from mmfuse import tensor as T
from mmfuse.errors import ConfigError, ShapeError
from mmfuse.fdcheck import compare_gradients
from mmfuse.rng import Rng
from mmfuse.scan import ScanParams, init_scan_params
from mmfuse.ss2d import (
    directional_scan,
    init_vss_params,
    make_permutations,
    ss2d_forward,
    vss_block,
)
from mmfuse.tensor import Tensor


def test_permutations_single_token():
    p = make_permutations(1, 1)
    assert np.array_equal(p.forward, np.zeros((4, 1), dtype=np.int64))


def test_permutations_2x2_enumeration():
    p = make_permutations(2, 2)
    assert p.forward[0].tolist() == [0, 1, 2, 3]
    assert p.forward[1].tolist() == [3, 2, 1, 0]
    assert p.forward[2].tolist() == [0, 2, 1, 3]
    assert p.forward[3].tolist() == [3, 1, 2, 0]


def test_permutations_2x3_column_major():
    p = make_permutations(2, 3)
    assert p.forward[2].tolist() == [0, 3, 1, 4, 2, 5]


@pytest.mark.parametrize("h,w", [(1, 1), (2, 2), (3, 5), (4, 4)])
def test_permutation_roundtrip(h, w):
    p = make_permutations(h, w)
    x = Rng(h * 10 + w).normal("x", (h * w, 3))
    for k in range(4):
        assert np.array_equal(x[p.forward[k]][p.inverse[k]], x)
        # bijection and the documented reversals
        assert sorted(p.forward[k].tolist()) == list(range(h * w))
    assert np.array_equal(p.forward[1], p.forward[0][::-1])
    assert np.array_equal(p.forward[3], p.forward[2][::-1])


def _shared_params(channels=3, state=2, seed=0):
    sp = init_scan_params(Rng(seed), "sp", channels, state)
    return [sp, sp, sp, sp]


def test_single_token_grid_is_four_times_one_step():
    perms = make_permutations(1, 1)
    sps = _shared_params()
    x = Tensor(Rng(1).normal("x", (1, 3)))
    merged = directional_scan(x, sps, perms)

    from mmfuse.scan import (discretized_sequence, effective_state_matrix,
                             project_params, scan_sequential)
    p = sps[0]
    delta, b, c = project_params(x, p)
    dseq = discretized_sequence(x, delta, effective_state_matrix(p), b, c, p.d_skip)
    y, _ = scan_sequential(dseq, x)
    assert np.allclose(merged.data, 4.0 * y.data, atol=1e-14)


def test_memoryless_shared_params_is_permutation_invariant():
    # a_bar == 0 makes each step independent, so the merged output is
    # 4 * pointwise map regardless of traversal order.
    channels, state = 2, 2
    rng = Rng(3)
    p = init_scan_params(rng, "p", channels, state)
    perms = make_permutations(2, 2)
    x = Tensor(rng.normal("x", (4, channels)))

    from mmfuse import scan as S

    def zero_a_discretize(delta, a, b_seq):
        a_bar, b_bar = _orig(delta, a, b_seq)
        return T.mul(a_bar, T.zeros(a_bar.shape)), b_bar

    _orig = S.discretize
    S.discretize = zero_a_discretize
    try:
        merged = directional_scan(x, [p, p, p, p], perms)
    finally:
        S.discretize = _orig

    d, b, c = S.project_params(x, p)
    per_tok = (np.einsum("ln,ldn->ld", c.data,
                         (d.data[..., None] * b.data[:, None, :]) * x.data[..., None])
               + p.d_skip.data * x.data)
    assert np.allclose(merged.data, 4.0 * per_tok, atol=1e-13)


def test_directional_sequences_are_permutations_of_input():
    perms = make_permutations(4, 4)
    x = Rng(7).normal("x", (16, 3))
    for k in range(4):
        seq = x[perms.forward[k]]
        assert sorted(map(tuple, seq.tolist())) == sorted(map(tuple, x.tolist()))


def test_constant_input_shared_params_same_scan_output_per_rank():
    perms = make_permutations(3, 3)
    sps = _shared_params(channels=2, state=2, seed=5)
    x = Tensor(np.tile(np.array([[0.4, -1.2]]), (9, 1)))
    xs = T.stack([T.take(x, perms.forward[k], axis=-2) for k in range(4)], axis=0)
    from mmfuse.ss2d import stacked_projection, stacked_state_matrix, _stack_field, _lift
    from mmfuse.scan import discretized_sequence, scan_sequential
    delta, b, c = stacked_projection(xs, sps)
    a = stacked_state_matrix(sps, x.ndim - 1)
    d_skip = _lift(_stack_field(sps, "d_skip"), x.ndim - 1)
    dseq = discretized_sequence(xs, delta, a, b, c, d_skip)
    y, _ = scan_sequential(dseq, xs)
    for k in range(1, 4):
        assert np.allclose(y.data[0], y.data[k], atol=1e-14)


def test_vss_block_zero_out_proj_is_identity():
    rng = Rng(11)
    perms = make_permutations(2, 3)
    params = init_vss_params(rng, "blk", 3, 2, perms)
    params.out_w.data[:] = 0.0
    params.out_b.data[:] = 0.0
    x = Tensor(rng.normal("x", (6, 3)))
    y = vss_block(x, params)
    assert np.array_equal(y.data, x.data)


@pytest.mark.parametrize("h,w", [(1, 1), (2, 2), (1, 8), (3, 5), (8, 8)])
def test_vss_block_shape_contract(h, w):
    rng = Rng(h * 31 + w)
    perms = make_permutations(h, w)
    params = init_vss_params(rng, "blk", 4, 2, perms)
    x = Tensor(rng.normal("x", (h * w, 4)))
    assert vss_block(x, params).shape == x.shape
    xb = Tensor(rng.normal("xb", (2, h * w, 4)))
    assert vss_block(xb, params).shape == xb.shape


def test_vss_block_gradients_match_fd():
    rng = Rng(23)
    perms = make_permutations(2, 2)
    params = init_vss_params(rng, "blk", 2, 2, perms)
    x = Tensor(rng.normal("x", (4, 2)), requires_grad=True)
    w = Tensor(rng.normal("w", (4, 2)))

    named = dict(params.named_tensors("blk."))
    named["x"] = x

    def loss():
        y = vss_block(x, params)
        return T.tsum(T.mul(y, w))

    errs = compare_gradients(loss, named)
    assert max(errs.values()) <= 1e-4, {k: v for k, v in errs.items() if v > 1e-4}


def test_token_count_mismatch_raises():
    rng = Rng(2)
    perms = make_permutations(2, 2)
    params = init_vss_params(rng, "blk", 3, 2, perms)
    with pytest.raises(ShapeError):
        ss2d_forward(Tensor(rng.normal("x", (5, 3))), params)


def test_vss_params_require_matching_scan_dims():
    rng = Rng(4)
    perms = make_permutations(2, 2)
    params = init_vss_params(rng, "blk", 3, 2, perms)
    bad = init_scan_params(rng, "bad", 3, 4)
    with pytest.raises(ConfigError):
        type(params)(
            in_w=params.in_w, in_b=params.in_b,
            mix_scale=params.mix_scale, mix_shift=params.mix_shift,
            scans=[params.scans[0], params.scans[1], params.scans[2], bad],
            ln_scale=params.ln_scale, ln_shift=params.ln_shift,
            gate_w=params.gate_w, gate_b=params.gate_b,
            out_w=params.out_w, out_b=params.out_b, perms=perms,
        )
