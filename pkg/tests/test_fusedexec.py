import numpy as np
import pytest

from lpbn import fusedexec as fx
from lpbn import quantizers as qz
from lpbn.normcore import RunningStats, normalize_forward


def random_layer(rng, n_in, n_out, dtype=np.float64):
    """Affine and weights with magnitudes spread over 2^-20..2^20, random signs."""

    def draw(*shape):
        mag = np.ldexp(rng.uniform(1, 2, shape), rng.integers(-20, 20, shape))
        return (mag * rng.choice([-1.0, 1.0], shape)).astype(dtype)

    return draw(n_in), draw(n_in), draw(n_in, n_out)


def code_of(sid, value):
    return int(np.flatnonzero(qz.codebook(sid) == value)[0])


def test_scale_by_pow2_examples():
    assert fx.scale_by_pow2(6.0, -3) == 0.75
    assert fx.scale_by_pow2(1.0, 4) == 16.0
    assert fx.scale_by_pow2(0.0, 4) == 0.0
    assert fx.scale_by_pow2(np.float32(3.0), 2) == np.float32(12.0)


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_scale_by_pow2_matches_multiply(rng, dtype):
    v = (rng.standard_normal(10**6) * 100).astype(dtype)
    k = rng.integers(-30, 30, 10**6)
    got = fx.scale_by_pow2(v, k)
    want = v * np.ldexp(np.ones(10**6, dtype=dtype), k).astype(dtype)
    assert np.array_equal(got.view(np.uint8), want.view(np.uint8))


def test_scale_by_pow2_range_errors():
    with pytest.raises(FloatingPointError):
        fx.scale_by_pow2(1e300, 100)
    with pytest.raises(FloatingPointError):
        fx.scale_by_pow2(1e-300, -100)
    with pytest.raises(FloatingPointError):
        fx.scale_by_pow2(5e-324, 1)


def test_fuse_examples():
    s = fx.fuse_affine_relu_linear([2.0], [1.0], [[3.0]])
    assert (s.aw[0, 0], s.bw[0, 0], s.threshold[0], s.direction[0]) == (6.0, 3.0, -0.5, 1)
    s = fx.fuse_affine_relu_linear([-1.0], [0.0], [[1.0]])
    assert s.threshold[0] == 0 and s.direction[0] == -1
    s = fx.fuse_affine_relu_linear([0.0], [2.0], [[5.0]])
    assert s.direction[0] == 0 and s.active_table.all()
    out = fx.fused_forward(np.array([code_of("L4", 0.125)]), s)
    assert out[0, 0] == 10.0


def test_fused_scalar_cases():
    one = code_of("L4", 1.0)
    s = fx.fuse_affine_relu_linear([2.0], [1.0], [[3.0]])
    assert fx.fused_forward(np.array([one]), s)[0, 0] == 9.0
    s = fx.fuse_affine_relu_linear([-1.0], [0.0], [[1.0]])
    assert fx.fused_forward(np.array([one]), s)[0, 0] == 0.0


def test_non_log_scheme_rejected():
    with pytest.raises(ValueError, match="log-scale"):
        fx.fuse_affine_relu_linear([1.0], [0.0], [[1.0]], "U4")


@pytest.mark.parametrize("sid", ["L2", "L3", "L4", "L5"])
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_fused_matches_expanded_path_bit_exactly(rng, sid, dtype):
    n_codes = len(qz.codebook(sid))
    for _ in range(20):
        a, b, W = random_layer(rng, 8, 8, dtype)
        codes = rng.integers(0, n_codes, (16, 8))
        q = qz.codebook(sid).astype(dtype)[codes]
        spec = fx.fuse_affine_relu_linear(a, b, W, sid)
        fused = fx.fused_forward(qz.pack(sid, codes), spec)
        assert np.array_equal(fused, fx.expanded_forward(q, a, b, W))


def test_fused_close_to_factored_naive_path(rng):
    a, b, W = random_layer(rng, 16, 8)
    codes = rng.integers(0, 16, (32, 16))
    q = qz.codebook("L4")[codes]
    fused = fx.fused_forward(codes, fx.fuse_affine_relu_linear(a, b, W))
    naive = fx.naive_forward(q, a, b, W)
    scale = (np.abs(np.maximum(a * q + b, 0))[:, :, None] * np.abs(W)[None]).sum(axis=1)
    assert np.all(np.abs(fused - naive) <= 64 * np.finfo(float).eps * scale)


def test_gate_matches_float_condition(rng):
    a = np.array([1.5, -0.75, 0.0, 0.0, 2.0, -3.0])
    b = np.array([0.2, 0.5, 1.0, -1.0, -0.25, 0.375])
    for sid in ("L2", "L3", "L4", "L5"):
        spec = fx.fuse_affine_relu_linear(a, b, np.ones((6, 1)), sid)
        cb = qz.codebook(sid)
        assert np.array_equal(spec.active_table, a[:, None] * cb[None, :] + b[:, None] > 0)
        # threshold logic agrees wherever a != 0
        q = cb[None, :]
        by_threshold = np.where(spec.direction[:, None] > 0, q > spec.threshold[:, None], q < spec.threshold[:, None])
        nz = a != 0
        assert np.array_equal(by_threshold[nz], spec.active_table[nz])


def test_count_ops_examples():
    assert fx.count_ops("naive", 1, 1) == fx.OpCount(float_mul=1, accumulate=1)
    f = fx.count_ops("fused", 1, 1)
    assert (f.float_mul, f.int_add, f.float_add) == (0, 1, 1)
    assert fx.count_ops("naive", 7, 5).float_mul == 35 and fx.count_ops("fused", 7, 5).float_mul == 0


def test_instrumented_counts(rng):
    a, b, W = random_layer(rng, 12, 4)
    codes = rng.integers(0, 16, (10, 12))
    q = qz.codebook("L4")[codes]
    active = a * q + b > 0
    pairs = int(active.sum()) * 4

    naive = fx.OpCounter()
    fx.naive_forward(q, a, b, W, naive)
    assert naive.float_mul == pairs == fx.count_ops("naive", 12, 4, 10, active).float_mul

    fused = fx.OpCounter()
    fx.fused_forward(codes, fx.fuse_affine_relu_linear(a, b, W), fused)
    expected = fx.count_ops("fused", 12, 4, 10, active)
    assert fused.float_mul == 0
    assert fused.int_add == expected.int_add
    assert fused.float_add == expected.float_add + expected.accumulate


def test_l5_uses_companion_weights(rng):
    a, b, W = random_layer(rng, 4, 3)
    spec = fx.fuse_affine_relu_linear(a, b, W, "L5")
    assert spec.aw_sqrt2 is not None
    assert np.array_equal(spec.aw_sqrt2, spec.aw * np.sqrt(2))
    assert fx.fuse_affine_relu_linear(a, b, W, "L4").aw_sqrt2 is None


def test_fold_examples():
    Wf, bf = fx.fold_norm_into_learnt(np.array([[2.0]]), np.array([1.0]), RunningStats(np.array([1.0]), np.array([4.0])), eps=0.0)
    assert (Wf[0, 0], bf[0]) == (1.0, 0.0)
    assert 3 * Wf[0, 0] + bf[0] == ((2 * 3 + 1) - 1) / 2
    W, bias = np.array([[0.5, -2.0]]), np.array([0.25, 3.0])
    Wf, bf = fx.fold_norm_into_learnt(W, bias, RunningStats(np.zeros(2), np.ones(2)), eps=0.0)
    assert np.array_equal(Wf, W) and np.array_equal(bf, bias)
    with pytest.raises(ZeroDivisionError):
        fx.fold_norm_into_learnt(W, bias, RunningStats(np.zeros(2), np.zeros(2)), eps=0.0)


def test_fold_linear_matches_normalize(rng):
    x = rng.standard_normal((64, 10)).astype(np.float32)
    W = rng.standard_normal((10, 6)).astype(np.float32)
    bias = rng.standard_normal(6).astype(np.float32)
    y = x @ W + bias
    _, st = normalize_forward(y)
    run = RunningStats(st.mean, st.var)
    Wf, bf = fx.fold_norm_into_learnt(W, bias, run)
    n = (y - st.mean) * st.inv_std
    assert np.all(np.abs((x @ Wf + bf) - n) <= 1e-6 * np.maximum(1, np.abs(n)))
    codes_fold = qz.quantize_codes("L4", x @ Wf + bf)
    assert np.mean(codes_fold == qz.quantize_codes("L4", n)) > 0.999


def test_fold_conv_matches_normalize(rng):
    from lpbn.tensorcore import conv2d

    x = rng.standard_normal((4, 3, 6, 6)).astype(np.float32)
    W = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
    bias = rng.standard_normal(5).astype(np.float32)
    y = conv2d(x, W, 1, 1) + bias[None, :, None, None]
    _, st = normalize_forward(y)
    Wf, bf = fx.fold_norm_into_learnt(W, bias, RunningStats(st.mean, st.var))
    folded = conv2d(x, Wf, 1, 1) + bf[None, :, None, None]
    n = (y - st.mean[None, :, None, None]) * st.inv_std[None, :, None, None]
    assert np.all(np.abs(folded - n) <= 1e-6 * np.maximum(1, np.abs(n)))
