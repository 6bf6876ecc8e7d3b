import numpy as np
import pytest

from pokeflow import tensor as T
from pokeflow.tensor import Tensor, conv2d, conv_transpose2d, concat, grad_check, gradients


# ---- independent oracles -------------------------------------------------------


def conv2d_loops(x, w, stride=1, pad=0):
    """Direct nested-loop convolution, the oracle conv2d is checked against."""
    N, H, W, Cin = x.shape
    KH, KW, _, Cout = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    OH = (H + 2 * pad - KH) // stride + 1
    OW = (W + 2 * pad - KW) // stride + 1
    y = np.zeros((N, OH, OW, Cout))
    for n in range(N):
        for i in range(OH):
            for j in range(OW):
                for o in range(Cout):
                    acc = 0.0
                    for u in range(KH):
                        for v in range(KW):
                            for c in range(Cin):
                                acc += xp[n, i * stride + u, j * stride + v, c] * w[u, v, c, o]
                    y[n, i, j, o] = acc
    return y


def finite_diff(fn, arrays, eps=1e-5):
    """Central-difference gradients of a scalar numpy function."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat_a = a.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_a.size):
            orig = flat_a[i]
            flat_a[i] = orig + eps
            fp = fn(*arrays)
            flat_a[i] = orig - eps
            fm = fn(*arrays)
            flat_a[i] = orig
            flat_g[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6))


# ---- forward op examples -------------------------------------------------------


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 4))
    out = Tensor(np.eye(3)) @ Tensor(a)
    np.testing.assert_allclose(out.data, a, rtol=1e-6)


def test_exp_of_zeros_is_ones():
    out = Tensor(np.zeros((2, 3))).exp()
    np.testing.assert_array_equal(out.data, np.ones((2, 3), np.float32))


def test_conv2d_matches_nested_loop_oracle():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 8, 8, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    got = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64)).data
    want = conv2d_loops(x, w)
    assert np.max(np.abs(got - want)) < 1e-6


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 0), (2, 1)])
def test_conv2d_stride_padding_vs_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 7, 9, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    got = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                 stride=stride, padding=pad).data
    want = conv2d_loops(x, w, stride=stride, pad=pad)
    assert np.max(np.abs(got - want)) < 1e-6


def test_conv_transpose_is_adjoint_of_conv():
    # <conv(x), y> == <x, conv_T(y)> for matching geometry
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 8, 8, 3))
    w = rng.normal(size=(3, 3, 3, 5))
    y = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride=2, padding=1).data
    g = rng.normal(size=y.shape)
    wt = np.ascontiguousarray(w.transpose(0, 1, 3, 2))
    back = conv_transpose2d(Tensor(g, dtype=np.float64), Tensor(wt, dtype=np.float64),
                            stride=2, padding=1, output_padding=1).data
    assert abs(np.sum(y * g) - np.sum(x * back)) < 1e-8 * max(1.0, abs(np.sum(y * g)))


def test_conv_transpose_doubles_spatial_size():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 4, 4, 6)), dtype=np.float32)
    w = Tensor(np.random.default_rng(1).normal(size=(3, 3, 6, 2)), dtype=np.float32)
    assert conv_transpose2d(x, w).shape == (1, 8, 8, 2)


def test_shape_mismatch_error_names_op_and_shapes():
    with pytest.raises(T.ShapeError, match="matmul"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))
    with pytest.raises(T.ShapeError, match=r"conv2d.*\(1, 4, 4, 3\).*\(3, 3, 2, 4\)"):
        conv2d(Tensor(np.zeros((1, 4, 4, 3))), Tensor(np.zeros((3, 3, 2, 4))))


def test_nonfinite_input_rejected():
    with pytest.raises(T.NumericError):
        Tensor(np.array([1.0, np.nan]))
    with np.errstate(over="ignore"):
        with pytest.raises(T.NumericError, match="exp"):
            Tensor(np.array([1000.0], dtype=np.float32)).exp()


# ---- backward examples -----------------------------------------------------------


def test_backward_sum_of_squares():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_sum_exp_at_zero():
    x = Tensor(np.zeros(5), requires_grad=True)
    x.exp().sum().backward()
    np.testing.assert_allclose(x.grad, np.ones(5))


def test_backward_three_layer_composite_vs_finite_differences():
    rng = np.random.default_rng(11)
    w1 = rng.normal(size=(4, 6)) * 0.5
    w2 = rng.normal(size=(6, 3)) * 0.5
    b = rng.normal(size=(3,)) * 0.1
    x = rng.normal(size=(2, 4))

    def np_loss(w1a, w2a, ba):
        h = np.tanh(x @ w1a)
        o = 1.0 / (1.0 + np.exp(-(h @ w2a + ba)))
        return float(np.sum(o * o))

    def t_loss(w1t, w2t, bt):
        h = (Tensor(x, dtype=np.float64) @ w1t).tanh()
        o = ((h @ w2t) + bt).sigmoid()
        return (o * o).sum()

    params = [Tensor(w1, requires_grad=True, dtype=np.float64),
              Tensor(w2, requires_grad=True, dtype=np.float64),
              Tensor(b, requires_grad=True, dtype=np.float64)]
    analytic = gradients(t_loss(*params), params)
    numeric = finite_diff(np_loss, [w1, w2, b])
    for a, n in zip(analytic, numeric):
        assert rel_err(a, n) < 1e-4


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.ShapeError, match="scalar"):
        (x * 2).backward()


def test_untouched_leaves_get_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    g = gradients((x * x).sum(), [x, unused])
    np.testing.assert_allclose(g[0], 2 * np.ones(3))
    np.testing.assert_array_equal(g[1], np.zeros(2))


def test_backward_linearity():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True, dtype=np.float64)
    l1 = (x * x).sum()
    l2 = x.exp().sum()
    g_joint = gradients(l1 + l2, [x])[0].copy()
    g1 = gradients((x * x).sum(), [x])[0].copy()
    g2 = gradients(x.exp().sum(), [x])[0].copy()
    np.testing.assert_allclose(g_joint, g1 + g2, rtol=1e-12)


# ---- per-op gradient property: analytic vs central differences -------------------


def _op_cases(rng):
    a = rng.normal(size=(2, 3, 4, 2))
    b = rng.normal(size=(2, 3, 4, 2))
    m1 = rng.normal(size=(3, 4))
    m2 = rng.normal(size=(4, 2))
    k = rng.normal(size=(3, 3, 2, 3)) * 0.5
    kt = rng.normal(size=(3, 3, 2, 3)) * 0.5
    pos = np.abs(rng.normal(size=(2, 3))) + 0.5
    perm = rng.permutation(2)
    return [
        ("add", lambda t: (t[0] + t[1]).sum(), [a, b]),
        ("mul", lambda t: (t[0] * t[1]).sum(), [a, b]),
        ("div", lambda t: (t[0] / (t[1] * t[1] + 1.0)).sum(), [a, b]),
        ("matmul", lambda t: (t[0] @ t[1]).sum(), [m1, m2]),
        ("conv2d", lambda t: conv2d(t[0], t[1], stride=1, padding=1).sum(), [a, k]),
        ("conv2d_s2", lambda t: conv2d(t[0], t[1], stride=2, padding=1).sum(), [a, k]),
        ("convT", lambda t: conv_transpose2d(t[0], t[1]).sum(), [rng.normal(size=(2, 2, 2, 2)), kt]),
        ("exp", lambda t: t[0].exp().sum(), [a * 0.3]),
        ("log", lambda t: t[0].log().sum(), [pos]),
        ("tanh", lambda t: t[0].tanh().sum(), [a]),
        ("sigmoid", lambda t: t[0].sigmoid().sum(), [a]),
        ("elu", lambda t: (t[0].elu() * t[0].elu()).sum(), [a + 0.05]),
        ("sum_axis", lambda t: (t[0].sum(axis=(1, 2)) ** 2).sum(), [a]),
        ("mean", lambda t: (t[0].mean(axis=3, keepdims=True) * t[0]).sum(), [a]),
        ("concat", lambda t: (concat([t[0], t[1]], axis=-1) ** 2).sum(), [a, b]),
        ("slice", lambda t: (t[0][:, 1:, ::2, :] ** 2).sum(), [a]),
        ("reshape", lambda t: (t[0].reshape(6, 8) @ t[0].reshape(8, 6)).sum(), [a]),
        ("permute", lambda t: (t[0].permute_channels(perm) * t[1]).sum(), [a, b]),
        ("abs", lambda t: t[0].abs().sum(), [a]),
        ("pow", lambda t: (t[0] ** 3).sum(), [a]),
    ]


def test_all_ops_match_finite_differences_100_seeds():
    # 20 ops x 5 seeds = 100 random instantiations, f64, 1e-4 relative
    failures = []
    for seed in range(5):
        rng = np.random.default_rng(1000 + seed)
        for name, fn, arrays in _op_cases(rng):
            pts = [Tensor(arr, requires_grad=True, dtype=np.float64) for arr in arrays]
            analytic = gradients(fn(pts), pts)

            def np_fn(*arrs):
                tens = [Tensor(x, dtype=np.float64) for x in arrs]
                return fn(tens).item()

            numeric = finite_diff(np_fn, arrays)
            for ga, gn in zip(analytic, numeric):
                err = rel_err(ga, gn)
                if err >= 1e-4:
                    failures.append((name, seed, err))
    assert not failures, failures


# ---- grad_check -------------------------------------------------------------------


def test_grad_check_linear_is_machine_precision():
    w = Tensor(np.random.default_rng(0).normal(size=(5,)), requires_grad=True, dtype=np.float64)
    c = Tensor(np.arange(5.0), dtype=np.float64)
    rep = grad_check(lambda p: (p * c).sum(), [w], eps=1e-4)
    assert rep.max_rel_error < 1e-9


def test_grad_check_quadratic_exact_up_to_rounding():
    w = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True, dtype=np.float64)
    rep = grad_check(lambda p: (p * p).sum(), [w], eps=0.1)
    assert rep.max_rel_error < 1e-10


def test_grad_check_rejects_bad_eps():
    w = Tensor(np.ones(2), requires_grad=True, dtype=np.float64)
    with pytest.raises(ValueError, match="eps"):
        grad_check(lambda p: (p * p).sum(), [w], eps=0.0)


def test_no_grad_skips_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad
    assert y._backward is None
