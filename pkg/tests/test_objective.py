import numpy as np
import pytest

from pokeflow import flows as F
from pokeflow.objective import MiBoundReport, mi_bound_check, nll_loss, sample_prior
from pokeflow.tensor import Tensor, grad_check


class IdentityFlow:
    def inverse(self, z, cond):
        return z, Tensor(np.zeros(z.shape[0], z.dtype.type))


class ScalingFlow:
    """r = k * z, so the encoding pass has logdet = D*log(k) per sample."""

    def __init__(self, k, dims):
        self.k = k
        self.dims = dims

    def inverse(self, z, cond):
        ld = np.full(z.shape[0], self.dims * np.log(self.k), z.dtype.type)
        return z * self.k, Tensor(ld)


def _cond(n):
    return Tensor(np.zeros((n, 1, 1, 0), np.float32))


def test_nll_identity_flow_zero_input():
    z = Tensor(np.zeros((3, 2, 2, 4), np.float32))
    rep = nll_loss(z, _cond(3), IdentityFlow())
    assert rep.nll.item() == 0.0


def test_nll_decomposition_identity_exact():
    z = Tensor(np.random.default_rng(0).normal(size=(8, 2, 2, 4)).astype(np.float32))
    rep = nll_loss(z, _cond(8), ScalingFlow(1.7, 16))
    assert rep.nll.item() == rep.prior_term.item() - rep.logdet_term.item()


def test_nll_identity_flow_expectation_is_half_dim():
    # E[0.5*||z||^2] = D/2 for standard normal z, Monte Carlo within 1%
    d = 16
    draws = 100_000
    rng = np.random.default_rng(42)
    total = 0.0
    for a in range(0, draws, 12_500):
        z = Tensor(rng.standard_normal((12_500, 2, 2, 4)).astype(np.float64))
        total += nll_loss(z, _cond(12_500), IdentityFlow()).nll.item() * 12_500
    mean = total / draws
    assert abs(mean - d / 2) / (d / 2) < 0.01


def test_nll_scaling_flow_hand_formula():
    # r = 2z in D dims: nll(z) = 2*||z||^2 - D*ln 2
    rng = np.random.default_rng(1)
    z_np = rng.normal(size=(4, 2, 2, 2))
    d = 8
    rep = nll_loss(Tensor(z_np), _cond(4), ScalingFlow(2.0, d))
    want = 2.0 * (z_np ** 2).sum(axis=(1, 2, 3)).mean() - d * np.log(2.0)
    np.testing.assert_allclose(rep.nll.item(), want, rtol=1e-6)


def test_nll_gradient_matches_finite_differences():
    stack = F.FlowStack(4, 1, 2, [1, 1], hidden=6, seed=0, dtype=np.float64)
    rng = np.random.default_rng(2)
    for name, p in stack.params().items():
        if name.endswith("scale"):
            p.data[...] = np.exp(rng.normal(scale=0.1, size=p.data.shape))
        else:
            p.data[...] = rng.normal(scale=0.2 / np.sqrt(max(p.data.size // p.data.shape[-1], 1)),
                                     size=p.data.shape)
    stack.mark_initialized()
    z = Tensor(rng.normal(size=(2, 2, 2, 4)))
    cond = Tensor(rng.normal(size=(2, 2, 2, 1)))
    params = list(stack.params().values())

    def loss_fn(*_):
        return nll_loss(z, cond, stack).nll

    rep = grad_check(loss_fn, params, eps=1e-5)
    assert rep.max_rel_error < 1e-4


# -- prior sampling --------------------------------------------------------------


def test_sample_prior_deterministic_per_seed():
    a = sample_prior((3, 4, 4, 2), seed=9)
    b = sample_prior((3, 4, 4, 2), seed=9)
    np.testing.assert_array_equal(a, b)
    c = sample_prior((3, 4, 4, 2), seed=10)
    assert np.any(a != c)


def test_sample_prior_moments():
    x = sample_prior((1_000_000,), seed=0, dtype=np.float64)
    assert abs(x.mean()) < 0.01
    assert abs(x.var() - 1.0) < 0.01


# -- mutual-information bound ---------------------------------------------------------


def test_mi_bound_independent_samples_near_zero():
    rng = np.random.default_rng(5)
    r = rng.standard_normal(100_000)
    cond = rng.standard_normal(100_000)
    rep = mi_bound_check(r, cond, bins=16)
    assert rep.kl_estimate < 0.02
    assert rep.mi_estimate < 0.02
    assert rep.bound_holds


def test_mi_bound_perfect_dependence_discrete():
    rng = np.random.default_rng(6)
    sym = rng.integers(0, 4, size=100_000).astype(np.float64)
    rep = mi_bound_check(sym, sym, bins=16)
    assert abs(rep.mi_estimate - np.log(4)) < 0.01
    assert rep.kl_estimate >= np.log(4) - rep.eps_stat


def test_mi_bound_constant_r_zero_mi():
    rng = np.random.default_rng(7)
    r = np.zeros(50_000)
    cond = rng.standard_normal(50_000)
    rep = mi_bound_check(r, cond, bins=16)
    assert rep.mi_estimate == 0.0


def test_mi_bound_widens_bins_when_sparse():
    rng = np.random.default_rng(8)
    r = rng.standard_normal((2_000, 2))
    cond = rng.standard_normal((2_000, 2))
    with pytest.warns(UserWarning, match="widening"):
        rep = mi_bound_check(r, cond, bins=16)
    assert rep.bins_r < 16 ** 2


def test_mi_bound_rejects_high_dims():
    with pytest.raises(ValueError, match="2 dims"):
        mi_bound_check(np.zeros((10, 3)), np.zeros(10))
