"""Optimizer steps against their closed-form oracles, plus full runs."""

import numpy as np
import pytest

from quantimed.algorithms import (
    NodeState,
    RunSetup,
    StepSizes,
    dsgd_step,
    initial_states,
    qdsgd_step,
    quantimed_step,
    run,
    stepsizes_convex,
    stepsizes_nonconvex,
)
from quantimed.compute_model import SpeedModel
from quantimed.metrics import matrix_form_update, optimality_gap, penalty_gradient
from quantimed.objectives import make_quadratic
from quantimed.quantize import QuantizerSpec
from quantimed.topology import (
    build_complete,
    build_erdos_renyi,
    build_ring,
    default_kappa,
    laplacian_mixing,
)

FAST = SpeedModel.degenerate(1e6)  # every node always finishes its whole shard


def _states_from(X):
    return [NodeState(node=i, x=np.array(row, dtype=float)) for i, row in enumerate(X)]


def _X(states):
    return np.stack([s.x for s in states])


def _random_instance(seed, n=5, m=4, p=3):
    rng = np.random.default_rng(seed)
    obj, shards = make_quadratic(n, m, p, seed=seed)
    g = build_erdos_renyi(n, 0.7, rng)
    w = laplacian_mixing(g, default_kappa(g))
    X = rng.standard_normal((n, p))
    return obj, shards, w, X


class TestStepSizes:
    def test_convex_schedule_values(self):
        s = stepsizes_convex(10_000, 0.4)
        assert s.alpha == pytest.approx(10 ** -0.8)
        assert s.eps == pytest.approx(10 ** -2.4)

    def test_convex_at_T_one(self):
        s = stepsizes_convex(1, 0.3)
        assert (s.alpha, s.eps) == (1.0, 1.0)

    def test_convex_rejects_boundary_delta(self):
        with pytest.raises(ValueError, match="open interval"):
            stepsizes_convex(100, 0.5)
        with pytest.raises(ValueError, match="open interval"):
            stepsizes_convex(100, 0.0)

    def test_nonconvex_schedule_values(self):
        s = stepsizes_nonconvex(64)
        assert s.alpha == pytest.approx(0.5)
        assert s.eps == pytest.approx(0.125)
        big = stepsizes_nonconvex(10**6)
        assert big.alpha == pytest.approx(0.1)
        assert big.eps == pytest.approx(0.001)
        one = stepsizes_nonconvex(1)
        assert (one.alpha, one.eps) == (1.0, 1.0)

    def test_eps_range_enforced(self):
        with pytest.raises(ValueError):
            StepSizes(alpha=0.1, eps=0.0)
        with pytest.raises(ValueError):
            StepSizes(alpha=0.0, eps=0.5)


class TestQuantimedStep:
    def test_two_node_hand_example(self):
        # exact gradients g_i = x_i (centers at zero), alpha = eps = 1
        obj, shards = make_quadratic(2, 1, 1, seed=0, centers=np.zeros((2, 1, 1)))
        w = laplacian_mixing(build_complete(2), 2.0)
        states = _states_from([[0.0], [2.0]])
        res = quantimed_step(
            states, w, StepSizes(1.0, 1.0), 1.0, FAST, None, obj, shards, seed=1, t=0
        )
        assert np.allclose(_X(res.states).ravel(), [1.0, -1.0], atol=1e-15)

    def test_consensus_fixed_point(self):
        # zero gradients and equal models stay put (rows of W sum to one)
        c = 0.83
        obj, shards = make_quadratic(3, 2, 2, seed=0, centers=np.full((3, 2, 2), c))
        g = build_ring(3)
        w = laplacian_mixing(g, default_kappa(g))
        states = _states_from(np.full((3, 2), c))
        res = quantimed_step(
            states, w, StepSizes(0.7, 0.4), 1.0, FAST, None, obj, shards, seed=2, t=0
        )
        assert np.allclose(_X(res.states), c, atol=1e-14)

    def test_round_time_is_constant(self):
        obj, shards = make_quadratic(2, 1, 1, seed=0)
        w = laplacian_mixing(build_complete(2), 2.0)
        states = initial_states(2, 1)
        res = quantimed_step(
            states, w, StepSizes(0.5, 0.5), 0.8, SpeedModel.uniform(10, 90),
            None, obj, shards, seed=3, t=0, tc=0.75,
        )
        assert res.round_seconds == 0.8 + 0.75

    def test_quantized_comm_time_scales_with_bits(self):
        obj, shards = make_quadratic(2, 1, 1, seed=0)
        w = laplacian_mixing(build_complete(2), 2.0)
        spec = QuantizerSpec(eta=0.05, s=4)
        res = quantimed_step(
            initial_states(2, 1), w, StepSizes(0.5, 0.5), 0.8,
            SpeedModel.uniform(10, 90), spec, obj, shards, seed=3, t=0, tc=3.0,
        )
        assert res.round_seconds == pytest.approx(0.8 + 0.75)

    @pytest.mark.parametrize("seed", range(10))
    def test_penalty_sgd_equivalence(self, seed):
        # with exact messages the step is one SGD step on the penalty
        obj, shards, w, X = _random_instance(seed)
        sizes = StepSizes(alpha=0.3, eps=0.25)
        res = quantimed_step(
            _states_from(X), w, sizes, 1.0, FAST, None, obj, shards, seed=seed, t=0
        )
        oracle = X - sizes.eps * penalty_gradient(w, sizes.alpha, X, res.grads)
        assert np.max(np.abs(_X(res.states) - oracle)) <= 1e-12

    @pytest.mark.parametrize("seed", range(10))
    def test_matrix_form_identity_with_quantization(self, seed):
        obj, shards, w, X = _random_instance(seed)
        spec = QuantizerSpec(eta=0.25, s=6)
        sizes = StepSizes(alpha=0.3, eps=0.2)
        res = quantimed_step(
            _states_from(X), w, sizes, 0.5, SpeedModel.uniform(10, 90), spec,
            obj, shards, seed=seed, t=3,
        )
        oracle = matrix_form_update(w, sizes.eps, sizes.alpha, X, res.z, res.grads)
        assert np.max(np.abs(_X(res.states) - oracle)) <= 1e-12

    def test_mean_preserved_with_zero_gradients_and_exact_messages(self):
        obj, shards, w, X = _random_instance(4)
        # centers equal to each node's model make every gradient zero
        centers = np.repeat(X[:, None, :], shards.m, axis=1)
        obj, shards = make_quadratic(5, 4, 3, seed=4, centers=centers)
        res = quantimed_step(
            _states_from(X), w, StepSizes(0.5, 0.6), 1.0, FAST, None, obj, shards,
            seed=5, t=0,
        )
        assert np.allclose(_X(res.states).mean(axis=0), X.mean(axis=0), atol=1e-13)

    def test_deadline_batches_recorded(self):
        obj, shards = make_quadratic(2, 10, 1, seed=0)
        w = laplacian_mixing(build_complete(2), 2.0)
        res = quantimed_step(
            initial_states(2, 1), w, StepSizes(0.5, 0.5), 0.5,
            SpeedModel.degenerate(8.0), None, obj, shards, seed=6, t=0,
        )
        assert list(res.batch_sizes) == [4, 4]  # floor(8 * 0.5)


class TestDsgdStep:
    def test_hand_example(self):
        obj, shards = make_quadratic(2, 1, 1, seed=0, centers=np.zeros((2, 1, 1)))
        w = laplacian_mixing(build_complete(2), 2.0)
        states = _states_from([[0.0], [2.0]])
        res = dsgd_step(states, w, 0.1, 1, FAST, obj, shards, seed=1, t=0)
        assert np.allclose(_X(res.states).ravel(), [1.0, 0.8], atol=1e-15)

    def test_zero_step_identity_mixing_is_identity_map(self):
        from quantimed.topology import MixingMatrix

        obj, shards = make_quadratic(3, 2, 2, seed=1)
        identity = MixingMatrix.from_matrix(np.eye(3), check=False)
        X = np.random.default_rng(0).standard_normal((3, 2))
        res = dsgd_step(_states_from(X), identity, 0.0, 2, FAST, obj, shards, seed=2, t=0)
        assert np.array_equal(_X(res.states), X)

    def test_full_batch_converges_to_optimum(self):
        # identical shards make the gossip map a strict contraction onto
        # the stacked optimum: alpha=0.2 keeps every mode inside the unit
        # circle (worst eigenvalue |lambda_min(W) - alpha| < 1)
        block = np.random.default_rng(3).standard_normal((1, 3, 2))
        centers = np.repeat(block, 4, axis=0)
        obj, shards = make_quadratic(4, 3, 2, seed=3, centers=centers)
        g = build_complete(4)
        w = laplacian_mixing(g, default_kappa(g))
        states = _states_from(np.random.default_rng(1).standard_normal((4, 2)) * 3)
        for t in range(200):
            states = dsgd_step(
                states, w, 0.2, shards.m, FAST, obj, shards, seed=4, t=t
            ).states
        assert optimality_gap(_X(states), obj.x_star) < 1e-6


class TestQdsgdStep:
    def test_matches_quantimed_with_aligned_batches(self):
        # same rng purposes: a degenerate speed that floors to the fixed
        # batch makes the two steps identical apart from timing
        obj, shards = make_quadratic(3, 20, 2, seed=5)
        g = build_ring(3)
        w = laplacian_mixing(g, default_kappa(g))
        X = np.random.default_rng(2).standard_normal((3, 2))
        sizes = StepSizes(0.4, 0.3)
        speed = SpeedModel.degenerate(10.0)
        a = quantimed_step(
            _states_from(X), w, sizes, 0.8, speed, None, obj, shards, seed=6, t=2
        )
        b = qdsgd_step(
            _states_from(X), w, sizes, 8, speed, None, obj, shards, seed=6, t=2
        )
        assert np.array_equal(_X(a.states), _X(b.states))
        assert np.array_equal(a.batch_sizes, b.batch_sizes)

    def test_small_eta_limit_matches_exact_update_in_expectation(self):
        obj, shards = make_quadratic(2, 1, 1, seed=0, centers=np.zeros((2, 1, 1)))
        w = laplacian_mixing(build_complete(2), 2.0)
        X = np.array([[0.0], [2.0]])
        sizes = StepSizes(1.0, 1.0)
        exact = qdsgd_step(
            _states_from(X), w, sizes, 1, FAST, None, obj, shards, seed=0, t=0
        )
        eta = 0.01
        spec = QuantizerSpec(eta=eta, s=10)
        outs = np.stack(
            [
                _X(
                    qdsgd_step(
                        _states_from(X), w, sizes, 1, FAST, spec, obj, shards,
                        seed=s, t=0,
                    ).states
                )
                for s in range(500)
            ]
        )
        se = eta / 2 / np.sqrt(500)
        assert np.max(np.abs(outs.mean(axis=0) - _X(exact.states))) < 3 * se

    def test_sixteen_bit_path_costs_full_comm_time(self):
        obj, shards = make_quadratic(2, 4, 1, seed=1)
        w = laplacian_mixing(build_complete(2), 2.0)
        spec = QuantizerSpec(eta=0.01, s=16)
        res = qdsgd_step(
            initial_states(2, 1), w, StepSizes(0.5, 0.5), 2,
            SpeedModel.degenerate(10.0), spec, obj, shards, seed=1, t=0, tc=3.0,
        )
        assert res.round_seconds == pytest.approx(0.2 + 3.0)


class TestRunSetupValidation:
    def _setup(self, **overrides):
        obj, shards = make_quadratic(3, 2, 1, seed=0)
        g = build_ring(3)
        base = dict(
            algo="quantimed",
            graph=g,
            mixing=laplacian_mixing(g, default_kappa(g)),
            objective=obj,
            shards=shards,
            speed_model=FAST,
            sizes=StepSizes(0.5, 0.5),
            seed=0,
            T=1,
            deadline=1.0,
        )
        base.update(overrides)
        return RunSetup(**base)

    def test_quantimed_needs_deadline(self):
        with pytest.raises(ValueError, match="deadline"):
            self._setup(deadline=None)

    def test_baselines_need_batch(self):
        with pytest.raises(ValueError, match="batch"):
            self._setup(algo="dsgd", deadline=None)

    def test_async_needs_budget(self):
        with pytest.raises(ValueError, match="budget"):
            self._setup(algo="async", deadline=None, batch=2, T=None)

    def test_unknown_algo(self):
        with pytest.raises(ValueError, match="unknown algorithm"):
            self._setup(algo="sgd")


class TestRun:
    def _setup(self, algo="quantimed", seed=9, **overrides):
        obj, shards = make_quadratic(4, 6, 2, seed=seed)
        g = build_ring(4)
        base = dict(
            algo=algo,
            graph=g,
            mixing=laplacian_mixing(g, default_kappa(g)),
            objective=obj,
            shards=shards,
            speed_model=SpeedModel.uniform(10, 90),
            sizes=StepSizes(0.2, 0.5),
            seed=seed,
            tc=1.0,
            T=10,
            deadline=0.5 if algo == "quantimed" else None,
            batch=None if algo == "quantimed" else 3,
            time_budget=None,
        )
        base.update(overrides)
        return RunSetup(**base)

    def test_zero_iterations_yields_initial_row_only(self):
        sim = run(self._setup(T=0))
        assert len(sim.rows) == 1
        row = sim.rows[0]
        assert row.iteration == 0 and row.sim_time_s == 0.0 and row.bytes == 0
        assert np.all(sim.final_models == 0.0)

    def test_rows_are_one_per_iteration_with_monotone_time(self):
        sim = run(self._setup(T=10))
        assert len(sim.rows) == 11
        times = [r.sim_time_s for r in sim.rows]
        assert times == sorted(times) and times[0] == 0.0

    def test_identical_setups_reproduce_identically(self):
        a = run(self._setup())
        b = run(self._setup())
        assert np.array_equal(a.final_models, b.final_models)
        assert a.rows == b.rows

    def test_gap_reported_for_convex_family(self):
        sim = run(self._setup(T=3))
        assert all(r.gap is not None and r.gap >= 0 for r in sim.rows)

    def test_pilot_regression_gap_shrinks_tenfold(self):
        # quadratic, ring of 10, convex schedule at delta=0.4, near-exact
        # messages: after T=2000 the average squared distance to the
        # optimum is well below a tenth of its initial value
        obj, shards = make_quadratic(10, 20, 2, seed=70)
        g = build_ring(10)
        setup = RunSetup(
            algo="quantimed",
            graph=g,
            mixing=laplacian_mixing(g, default_kappa(g)),
            objective=obj,
            shards=shards,
            speed_model=SpeedModel.uniform(10, 90),
            sizes=stepsizes_convex(2000, 0.4),
            seed=70,
            quantizer=QuantizerSpec(eta=1e-4, s=16),
            T=2000,
            deadline=0.8,
        )
        sim = run(setup)
        assert sim.rows[-1].gap < sim.rows[0].gap / 10.0


class TestAsyncRun:
    def _setup(self, algo, speed, seed=11, T=None, budget=None, tc=0.5, n=3):
        obj, shards = make_quadratic(n, 6, 2, seed=seed)
        g = build_complete(n)
        return RunSetup(
            algo=algo,
            graph=g,
            mixing=laplacian_mixing(g, default_kappa(g)),
            objective=obj,
            shards=shards,
            speed_model=speed,
            sizes=StepSizes(0.2, 1.0),
            seed=seed,
            tc=tc,
            T=T,
            batch=3,
            time_budget=budget,
            grid_samples=8,
        )

    def test_equal_speeds_reproduce_synchronous_trajectory(self):
        # constant equal speeds fire all nodes simultaneously; reads of
        # strictly-earlier publications make each group one dsgd round
        speed = SpeedModel.degenerate(6.0)
        rounds = 5
        round_len = 3 / 6.0 + 0.5
        sync = run(self._setup("dsgd", speed, T=rounds))
        asy = run(self._setup("async", speed, budget=rounds * round_len + 1e-9))
        assert np.allclose(asy.final_models, sync.final_models, atol=1e-12)

    def test_single_node_is_plain_sgd(self):
        from quantimed.topology import Graph, MixingMatrix

        obj, shards = make_quadratic(1, 6, 2, seed=13)
        setup = RunSetup(
            algo="async",
            graph=Graph(n=1, edges=frozenset(), adjacency=((),)),
            mixing=MixingMatrix.from_matrix(np.array([[1.0]])),
            objective=obj,
            shards=shards,
            speed_model=SpeedModel.degenerate(3.0),
            sizes=StepSizes(0.3, 1.0),
            seed=13,
            tc=0.0,
            batch=6,
            time_budget=10.0,
            grid_samples=4,
        )
        sim = run(setup)
        # five full-batch SGD steps (events at t = 2, 4, ..., 10)
        x = np.zeros(2)
        for _ in range(5):
            x = x - 0.3 * (x - shards.node(0).mean(axis=0))
        assert np.allclose(sim.final_models[0], x, atol=1e-12)

    def test_stale_read_hand_trace(self):
        # speeds 10 and 5 with b=10: events at t=1,2,3... for node 0 and
        # t=2,4,... for node 1. At t=2 node 0 goes first (index tie-break)
        # and reads node 1's initial model; node 1 then reads node 0's
        # t=1 publication, not its simultaneous t=2 one.
        centers = np.concatenate(
            [np.full((1, 10, 1), 1.0), np.full((1, 10, 1), -1.0)]
        )
        obj, shards = make_quadratic(2, 10, 1, seed=0, centers=centers)
        alpha = 0.4
        setup = RunSetup(
            algo="async",
            graph=build_complete(2),
            mixing=laplacian_mixing(build_complete(2), 2.0),
            objective=obj,
            shards=shards,
            speed_model=[SpeedModel.degenerate(10.0), SpeedModel.degenerate(5.0)],
            sizes=StepSizes(alpha, 1.0),
            seed=1,
            tc=0.0,
            batch=10,
            time_budget=2.0,
            grid_samples=2,
        )
        sim = run(setup)
        # hand event trace (W = [[.5,.5],[.5,.5]], full-batch gradients):
        #   t=1, node 0: x0 = .5*0 + .5*0 - 0.4*(0 - 1)            = 0.40
        #   t=2, node 0: x0 = .5*0.4 + .5*0 - 0.4*(0.4 - 1)        = 0.44
        #   t=2, node 1: x1 = .5*0 + .5*0.4 - 0.4*(0 + 1)          = -0.20
        # the last line reads node 0's t=1 value; immediate visibility
        # would have produced .5*0.44 - 0.4 = -0.18 instead
        assert np.allclose(sim.final_models.ravel(), [0.44, -0.20], atol=1e-12)

    def test_async_rows_on_uniform_grid(self):
        speed = SpeedModel.uniform(10, 90)
        sim = run(self._setup("async", speed, budget=4.0))
        assert len(sim.rows) == 9  # initial row + 8 grid samples
        times = [r.sim_time_s for r in sim.rows]
        assert times == sorted(times)
        assert times[-1] == pytest.approx(4.0)
