"""Run metrics, the penalty-gradient oracle, and the rate envelopes."""

import numpy as np
import pytest

from quantimed.compute_model import SpeedModel
from quantimed.metrics import (
    TheoryConstants,
    consensus_error,
    constants_for,
    estimate_d_sq,
    estimate_gamma_sq,
    gamma1_sq,
    gamma2_sq,
    inverse_effective_batch,
    loglog_slope,
    matrix_form_update,
    optimality_gap,
    penalty_gradient,
    t_min_nonconvex,
    convex_rate_bound,
    nonconvex_rate_bounds,
)
from quantimed.objectives import global_gradient, make_quadratic
from quantimed.quantize import QuantizerSpec
from quantimed.topology import build_erdos_renyi, default_kappa, laplacian_mixing

W2 = np.array([[0.5, 0.5], [0.5, 0.5]])


def _constants(**overrides):
    base = dict(
        mu=1.0, K=1.0, gamma_sq=2.0, sigma_sq=0.5, beta=0.8, D_sq=10.0,
        n=10, m=200, T_d=0.8, E_inv_V=np.log(9.0) / 80.0,
    )
    base.update(overrides)
    return TheoryConstants(**base)


class TestConsensusAndGap:
    def test_scalar_pair(self):
        assert consensus_error(np.array([[1.0], [-1.0]])) == 1.0

    def test_all_equal_is_zero(self):
        assert consensus_error(np.full((5, 3), 2.2)) == 0.0

    def test_translation_invariance(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((6, 4))
        shifted = X + rng.standard_normal(4)[None, :]
        assert consensus_error(shifted) == pytest.approx(consensus_error(X), abs=1e-12)

    def test_gap_at_optimum_is_zero(self):
        x_star = np.array([1.0, 2.0])
        X = np.tile(x_star, (4, 1))
        assert optimality_gap(X, x_star) == 0.0

    def test_gap_scalar_pair(self):
        assert optimality_gap(np.array([[1.0], [-1.0]]), np.array([0.0])) == 1.0

    def test_gap_requires_optimum(self):
        with pytest.raises(ValueError, match="analytic optimum"):
            optimality_gap(np.zeros((2, 2)), None)

    @pytest.mark.parametrize("seed", range(5))
    def test_bias_variance_decomposition(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((7, 3))
        x_star = rng.standard_normal(3)
        lhs = optimality_gap(X, x_star)
        x_bar = X.mean(axis=0)
        rhs = consensus_error(X) + float(np.sum((x_bar - x_star) ** 2))
        assert lhs == pytest.approx(rhs, abs=1e-12)


class TestPenaltyGradient:
    def test_hand_value(self):
        X = np.array([[0.0], [2.0]])
        grads = np.array([[0.0], [2.0]])
        out = penalty_gradient(W2, 1.0, X, grads)
        assert np.allclose(out.ravel(), [-1.0, 3.0], atol=1e-15)

    def test_consensus_plus_zero_gradients_is_zero(self):
        X = np.full((2, 3), 0.7)
        out = penalty_gradient(W2, 0.3, X, np.zeros((2, 3)))
        assert np.max(np.abs(out)) <= 1e-15

    def test_stacked_optimum_norm_is_alpha_times_local_gradients(self):
        # at the consensus stacking of the global optimum, the penalty
        # gradient reduces to alpha times the local gradients, which do
        # not vanish unless all local optima coincide
        obj, shards = make_quadratic(4, 3, 2, seed=3)
        g = build_erdos_renyi(4, 0.9, np.random.default_rng(0))
        w = laplacian_mixing(g, default_kappa(g))
        X = np.tile(obj.x_star, (4, 1))
        grads = np.stack([obj.batch_grad(obj.x_star, shards.node(i)) for i in range(4)])
        alpha = 0.37
        out = penalty_gradient(w, alpha, X, grads)
        assert np.linalg.norm(out) == pytest.approx(
            alpha * np.linalg.norm(grads), rel=1e-12
        )
        assert np.linalg.norm(global_gradient(obj, shards, obj.x_star)) <= 1e-12

    def test_identical_local_optima_give_zero(self):
        centers = np.full((3, 2, 2), 1.5)
        obj, shards = make_quadratic(3, 2, 2, seed=0, centers=centers)
        X = np.tile(obj.x_star, (3, 1))
        grads = np.stack([obj.batch_grad(obj.x_star, shards.node(i)) for i in range(3)])
        g = build_erdos_renyi(3, 1.0, np.random.default_rng(0))
        w = laplacian_mixing(g, default_kappa(g))
        assert np.max(np.abs(penalty_gradient(w, 0.5, X, grads))) <= 1e-12


class TestMatrixFormUpdate:
    def test_reduces_to_gossip_row(self):
        X = np.array([[0.0], [2.0]])
        z = X.copy()
        grads = np.array([[0.0], [2.0]])
        out = matrix_form_update(W2, 1.0, 1.0, X, z, grads)
        assert np.allclose(out.ravel(), [1.0, -1.0], atol=1e-15)

    def test_eps_zero_freezes(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((4, 3))
        out = matrix_form_update(np.eye(4), 0.0, 0.9, X, rng.standard_normal((4, 3)), X)
        assert np.array_equal(out, X)


class TestBounds:
    def test_inverse_effective_batch_example(self):
        c = _constants(m=200, T_d=0.8)
        assert inverse_effective_batch(c) == pytest.approx(0.034332, abs=1e-6)
        doubled = _constants(m=200, T_d=1.6)
        assert inverse_effective_batch(doubled) == pytest.approx(0.017166, abs=1e-6)

    def test_large_shard_regime_switches_to_one_over_m(self):
        c = _constants(m=10, T_d=1e9)
        assert inverse_effective_batch(c) == 0.1

    def test_gamma_helpers(self):
        c = _constants(gamma_sq=3.0, n=4, m=5, T_d=1e9)
        assert gamma1_sq(c) == pytest.approx(3.0 * (1 / 5 + 1 / 20))
        assert gamma2_sq(c) == pytest.approx(2 * 3.0 * (1 / 5))

    def test_convex_bound_monotone_in_T(self):
        c = _constants()
        values = [convex_rate_bound(c, T, 0.4) for T in (10, 100, 1000, 10000)]
        assert all(a > b > 0 for a, b in zip(values, values[1:]))

    def test_convex_bound_monotone_in_deadline_until_cap(self):
        lo = convex_rate_bound(_constants(T_d=0.4), 100, 0.4)
        mid = convex_rate_bound(_constants(T_d=0.8), 100, 0.4)
        capped1 = convex_rate_bound(_constants(T_d=1e6), 100, 0.4)
        capped2 = convex_rate_bound(_constants(T_d=1e7), 100, 0.4)
        assert lo > mid > capped1
        assert capped1 == capped2

    def test_nonconvex_leading_term_ratio(self):
        c = _constants(gamma_sq=1.0, sigma_sq=0.0, T_d=1e9)
        conv1, cons1 = nonconvex_rate_bounds(c, 100)
        conv8, cons8 = nonconvex_rate_bounds(c, 800)
        # with only the T^(-1/3) terms active the ratio is exactly 8^(1/3) = 2
        assert cons1 / cons8 == pytest.approx(2.0, rel=1e-9)
        assert conv1 / conv8 == pytest.approx(2.0, rel=0.05)

    def test_beta_to_one_pole(self):
        near = nonconvex_rate_bounds(_constants(beta=0.9), 100)[0]
        nearer = nonconvex_rate_bounds(_constants(beta=0.99), 100)[0]
        assert nearer > near * 10

    def test_zero_noise_zero_bounds(self):
        c = _constants(gamma_sq=0.0, sigma_sq=0.0, D_sq=0.0)
        conv, cons = nonconvex_rate_bounds(c, 100)
        assert conv == 0.0 and cons == 0.0
        assert convex_rate_bound(c, 100, 0.3) == 0.0

    def test_t_min_nonconvex_informational(self):
        c = _constants(K=2.0, beta=0.5, lambda_min=-0.2)
        expected = max((1.2) ** 2, 2.0**1.5, (12 * np.sqrt(2) / 0.5) ** 6)
        assert t_min_nonconvex(c) == pytest.approx(expected)


class TestLogLogSlope:
    def test_exact_power_law(self):
        assert loglog_slope([(10, 1.0), (100, 0.1)]) == pytest.approx(-1.0)

    def test_constant_series(self):
        assert loglog_slope([(10, 2.0), (100, 2.0), (1000, 2.0)]) == pytest.approx(0.0)

    def test_synthetic_power_law_recovered(self):
        pts = [(T, 3.7 * T**-0.4) for T in (500, 2000, 8000)]
        assert loglog_slope(pts) == pytest.approx(-0.4, abs=1e-9)

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError, match="positive"):
            loglog_slope([(10, 0.0), (100, 1.0)])
        with pytest.raises(ValueError, match="two points"):
            loglog_slope([(10, 1.0)])


class TestEstimates:
    def test_gamma_sq_matches_direct_variance(self):
        obj, shards = make_quadratic(3, 4, 2, seed=11)
        grads = obj.sample_grads(np.zeros(2), shards.all_samples())
        direct = np.mean(np.sum((grads - grads.mean(axis=0)) ** 2, axis=1))
        assert estimate_gamma_sq(obj, shards) == pytest.approx(direct, rel=1e-12)

    def test_d_sq_exact_for_quadratic(self):
        obj, shards = make_quadratic(3, 5, 2, seed=12)
        d_sq, estimated = estimate_d_sq(obj, shards)
        assert not estimated
        # per-node optimum is the center mean; D^2 = 2K sum_i (f_i(0) - f_i*)
        total = 0.0
        for i in range(3):
            block = shards.node(i)
            f0 = obj.sample_losses(np.zeros(2), block).mean()
            fstar = obj.sample_losses(block.mean(axis=0), block).mean()
            total += f0 - fstar
        assert d_sq == pytest.approx(2.0 * total, rel=1e-12)

    def test_constants_for_assembles_everything(self):
        obj, shards = make_quadratic(4, 5, 2, seed=13)
        g = build_erdos_renyi(4, 0.9, np.random.default_rng(2))
        w = laplacian_mixing(g, default_kappa(g))
        quant = QuantizerSpec(eta=0.1, s=4)
        c = constants_for(obj, shards, w, quant, SpeedModel.uniform(10, 90), t_d=0.8)
        assert c.sigma_sq == pytest.approx(2 * 0.1**2 / 4.0)
        assert c.beta == w.beta
        assert c.E_inv_V == pytest.approx(np.log(9.0) / 80.0)
        assert c.n == 4 and c.m == 5
        assert c.lambda_min == pytest.approx(w.lambda_min)
