import math

import numpy as np
import pytest

import oracles
from conftest import random_dictionary, random_lasso

from sparseinv.energy import (
    Dictionary,
    HierarchicalEnergy,
    InvariantProblem,
    LayerSpec,
    QuadraticReconstruction,
    SparseCodingProblem,
    UnifiedProblem,
    WeightedL1,
    eval_invariant_energy,
    eval_sparse_energy,
    eval_unified_energy,
    invariant_energy,
    normalize_columns,
    sparse_coding_energy,
    unified_energy,
)
from sparseinv.solver import (
    BacktrackingError,
    SolverOptions,
    backtrack,
    check_descent_lemma,
    check_stationarity,
    layer_step,
    momentum_update,
    shared_backtrack_L,
    shrink,
    solve_hierarchical,
    solve_invariant,
    solve_lasso,
)


def separable_two_layer(rng, with_problems=False):
    """Two independent lasso blocks swept as a 2-layer chain.

    Every boundary product is convex (each pair touches one variable), so
    the accelerated-rate and descent-inequality theory applies.
    """
    layers = []
    problems = []
    for _ in range(2):
        d = int(rng.integers(6, 13))
        m = int(rng.integers(d, 21))
        W = normalize_columns(rng.standard_normal((d, m)))
        x = W @ (rng.standard_normal(m) * (rng.random(m) < 0.3)) + 0.1 * rng.standard_normal(d)
        alpha = float(0.2 * np.abs(W.T @ x).max())
        problems.append(SparseCodingProblem(Dictionary(W), x, alpha))
        layers.append(LayerSpec(QuadraticReconstruction(W, x), WeightedL1(alpha), coupled=False))
    h = HierarchicalEnergy(layers)
    return (h, problems) if with_problems else h


class TestShrink:
    def test_zero(self):
        np.testing.assert_array_equal(shrink(np.zeros(2), 1.0), np.zeros(2))

    def test_free(self):
        np.testing.assert_allclose(shrink(np.array([1.2, -0.3]), 0.5), [0.7, 0.0])

    def test_nonneg(self):
        np.testing.assert_allclose(
            shrink(np.array([0.4, -0.4]), 0.1, nonneg=True), [0.3, 0.0]
        )

    def test_tie_maps_to_zero(self):
        np.testing.assert_array_equal(shrink(np.array([0.5, -0.5]), 0.5), [0.0, 0.0])

    def test_vector_threshold(self):
        out = shrink(np.array([1.0, 1.0]), np.array([0.25, 0.75]))
        np.testing.assert_allclose(out, [0.75, 0.25])


class TestMomentum:
    def test_first_step(self):
        t2, r1 = momentum_update(1.0)
        assert t2 == pytest.approx((1 + math.sqrt(5)) / 2, rel=1e-15)
        assert r1 == 0.0

    def test_limit_toward_one(self):
        _, r = momentum_update(1e9)
        assert 0.999999 < r < 1.0

    def test_sequence_against_high_precision(self):
        import mpmath

        mpmath.mp.dps = 50
        t_hp = mpmath.mpf(1)
        t = 1.0
        for _ in range(10):
            t_next_hp = (1 + mpmath.sqrt(1 + 4 * t_hp**2)) / 2
            r_hp = (t_hp - 1) / t_next_hp
            t, r = momentum_update(t)
            assert abs(t - float(t_next_hp)) <= 1e-14 * float(t_next_hp)
            assert abs(r - float(r_hp)) <= 1e-14
            t_hp = t_next_hp

    def test_domain(self):
        with pytest.raises(ValueError):
            momentum_update(0.5)


class TestLayerStep:
    def test_fixed_point_when_nothing_pulls(self, rng):
        # zero input and zero penalty: the step is the identity
        W = random_dictionary(rng, 5, 5)
        h = HierarchicalEnergy([
            LayerSpec(QuadraticReconstruction(W, np.zeros(5)), WeightedL1(0.0))
        ])
        z = np.zeros((1, 5))
        np.testing.assert_array_equal(layer_step(h, [z], 0, L=1.0), z)

    def test_orthonormal_single_step(self, rng):
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        W = Dictionary(q)
        x = rng.standard_normal(6)
        h = sparse_coding_energy(SparseCodingProblem(W, x, 0.3))
        step = layer_step(h, [np.zeros(6)], 0, L=1.0)
        np.testing.assert_allclose(step[0], shrink(q.T @ x, 0.3), atol=1e-14)

    def test_matches_grid_search_on_2d(self, rng):
        # the step minimizes the layer surrogate; a dense grid can't beat it
        for _ in range(5):
            W = random_dictionary(rng, 3, 2)
            x = rng.standard_normal(3)
            alpha = 0.3
            h = sparse_coding_energy(SparseCodingProblem(W, x, alpha))
            z0 = rng.standard_normal(2)
            L = 2.0
            grad = h.layer_grad(0, [z0[None, :]])

            def surrogate(z):
                d = z - z0
                return float(d @ grad[0]) + 0.5 * L * float(d @ d) + alpha * np.abs(z).sum()

            step = layer_step(h, [z0], 0, L=L)[0]
            _, grid_best = oracles.grid_min_2d(surrogate, -3.0, 3.0, n=301)
            assert surrogate(step) <= grid_best + 1e-9


class TestBacktrack:
    def test_accepts_immediately_above_lipschitz(self, rng):
        p = random_lasso(rng)
        L_true = float(np.linalg.eigvalsh(p.W.data.T @ p.W.data).max())
        h = sparse_coding_energy(p)
        L, _, trials = backtrack(h, [np.zeros(p.W.code_dim)], 0, L_prev=1.05 * L_true)
        assert trials == 0
        assert L == pytest.approx(1.05 * L_true)

    def test_accepted_at_most_eta_times_lipschitz(self, rng):
        for _ in range(20):
            p = random_lasso(rng, max_rows=16, max_cols=24)
            L_true = float(np.linalg.eigvalsh(p.W.data.T @ p.W.data).max())
            h = sparse_coding_energy(p)
            zs = [rng.standard_normal(p.W.code_dim)]
            L, _, _ = backtrack(h, zs, 0, L_prev=0.5, eta=2.0)
            assert L <= max(0.5, 2.0 * L_true) * (1 + 1e-12)

    def test_step_never_raises_energy(self, rng):
        for _ in range(1000):
            W = random_dictionary(rng, 5, 8)
            x = rng.standard_normal(5)
            alpha = float(rng.uniform(0.05, 0.5))
            p = SparseCodingProblem(W, x, alpha)
            h = sparse_coding_energy(p)
            z = rng.standard_normal(8)
            before = eval_sparse_energy(p, z)
            L, stepped, _ = backtrack(h, [z], 0, L_prev=float(rng.uniform(0.1, 2.0)))
            after = eval_sparse_energy(p, stepped[0])
            assert after <= before + 1e-12 * max(1.0, abs(before))

    def test_exhaustion_raises(self, rng):
        p = random_lasso(rng)
        h = sparse_coding_energy(p)
        with pytest.raises(BacktrackingError):
            backtrack(h, [rng.standard_normal(p.W.code_dim)], 0,
                      L_prev=1e-300, eta=1.5, max_backtracks=10)


class TestSolveLasso:
    def test_orthonormal_closed_form(self, rng):
        q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        p = SparseCodingProblem(Dictionary(q), rng.standard_normal(8), 0.3)
        z, trace = solve_lasso(p, SolverOptions(max_iter=5, tol=0.0, momentum="fista"))
        np.testing.assert_allclose(z, shrink(q.T @ p.x, 0.3), atol=1e-8)

    def test_dominating_penalty_gives_zero(self, rng):
        W = random_dictionary(rng, 6, 10)
        x = rng.standard_normal(6)
        alpha = float(np.abs(W.data.T @ x).max()) * 1.0001
        z, _ = solve_lasso(SparseCodingProblem(W, x, alpha), SolverOptions(max_iter=50))
        np.testing.assert_array_equal(z, np.zeros(10))

    def test_matches_coordinate_descent(self, rng):
        for _ in range(20):
            p = random_lasso(rng, max_rows=8, max_cols=16)
            z, _ = solve_lasso(p, SolverOptions(max_iter=3000, tol=0.0, momentum="fista"))
            z_cd = oracles.cd_lasso(p.W.data, p.x, p.alpha)
            e = eval_sparse_energy(p, z)
            e_cd = eval_sparse_energy(p, z_cd)
            assert abs(e - e_cd) <= 1e-6 * max(1.0, abs(e_cd))

    def test_batched_rows_match_individual(self, rng):
        W = random_dictionary(rng, 6, 10)
        X = rng.standard_normal((3, 6))
        opts = SolverOptions(max_iter=500, tol=0.0, momentum="fista")
        Z, _ = solve_lasso(SparseCodingProblem(W, X, 0.3), opts)
        for t in range(3):
            zt, _ = solve_lasso(SparseCodingProblem(W, X[t], 0.3), opts)
            np.testing.assert_allclose(Z[t], zt, atol=1e-9)


class TestSolveInvariant:
    def test_zero_input_gives_zero(self, rng):
        A = random_dictionary(rng, 6, 4, nonneg=True)
        u, _ = solve_invariant(InvariantProblem(A, np.zeros(6), 0.5, 0.3))
        np.testing.assert_array_equal(u, np.zeros(4))

    def test_scalar_analytic_minimizer(self):
        # one code unit, one pooled unit: u* = max(0, ln(alpha z* a / beta) / a)
        a, z_star, alpha, beta = 0.8, 3.0, 0.5, 0.3
        p = InvariantProblem(Dictionary(np.array([[a]]), nonneg=True),
                             np.array([z_star]), alpha, beta)
        u, _ = solve_invariant(p, SolverOptions(max_iter=500, tol=0.0))
        want = max(0.0, math.log(alpha * z_star * a / beta) / a)
        assert u[0] == pytest.approx(want, abs=1e-8)
        grid_u, grid_e = oracles.grid_min_1d(
            lambda v: eval_invariant_energy(p, np.array([v])), 0.0, 10.0
        )
        assert abs(u[0] - grid_u) <= 1e-4
        assert eval_invariant_energy(p, u) <= grid_e + 1e-12

    def test_large_beta_pins_zero(self, rng):
        for _ in range(20):
            A = random_dictionary(rng, 6, 4, nonneg=True)
            z_star = np.abs(rng.standard_normal(6))
            alpha = 0.5
            beta = float(alpha * (A.data.T @ z_star).max()) * 1.0001
            p = InvariantProblem(A, z_star, alpha, beta)
            u, _ = solve_invariant(p, SolverOptions(max_iter=100))
            np.testing.assert_array_equal(u, np.zeros(4))
            # grid confirmation on the best coordinate direction
            j = int((A.data.T @ z_star).argmax())
            probe = lambda v: eval_invariant_energy(p, v * np.eye(4)[j])
            _, grid_e = oracles.grid_min_1d(probe, 0.0, 5.0, n=5001)
            assert eval_invariant_energy(p, u) <= grid_e + 1e-12

    def test_iterates_stay_nonnegative(self, rng):
        A = random_dictionary(rng, 8, 5, nonneg=True)
        z_star = np.abs(rng.standard_normal(8)) * 3
        p = InvariantProblem(A, z_star, 0.5, 0.1)
        u, _ = solve_invariant(p, SolverOptions(max_iter=200, momentum="fista"))
        assert np.all(u >= 0.0)


class TestSolveHierarchical:
    def test_single_layer_reduces_to_lasso(self, rng):
        p = random_lasso(rng, max_rows=10, max_cols=16)
        opts = SolverOptions(max_iter=60, tol=0.0, momentum="none")
        z, trace = solve_lasso(p, opts)
        state, trace_h = solve_hierarchical(sparse_coding_energy(p), None, opts)
        np.testing.assert_array_equal(state.z[0][0], z)
        np.testing.assert_array_equal(trace.energies, trace_h.energies)

    def test_monotone_without_momentum(self, rng):
        for _ in range(20):
            W = random_dictionary(rng, 5, 8)
            A = random_dictionary(rng, 8, 4, nonneg=True)
            frames = rng.standard_normal((2, 5))
            h = unified_energy(UnifiedProblem(W, A, frames, 0.5, 0.3))
            _, trace = solve_hierarchical(h, None, SolverOptions(max_iter=60, tol=0.0, momentum="none"))
            assert np.all(np.diff(trace.energies) <= 1e-12)

    def test_descends_below_split_pipeline_point(self, rng):
        # tiny joint instance: 4 pixels, 3 code units, 2 pooled units
        W = random_dictionary(rng, 4, 3)
        A = random_dictionary(rng, 3, 2, nonneg=True)
        x = rng.standard_normal(4)
        up = UnifiedProblem(W, A, x[None, :], 0.5, 0.3)
        opts = SolverOptions(max_iter=2000, tol=0.0, momentum="fista")
        z_split, _ = solve_lasso(SparseCodingProblem(W, x, 0.5), opts)
        u_split, _ = solve_invariant(InvariantProblem(A, np.abs(z_split), 0.5, 0.3), opts)
        split_energy = eval_unified_energy(up, z_split[None, :], u_split)

        h = unified_energy(up)
        warm, _ = solve_hierarchical(h, [z_split[None, :], u_split[None, :]],
                                     SolverOptions(max_iter=500, tol=0.0, momentum="none"))
        warm_energy = eval_unified_energy(up, warm.z[0], warm.z[1][0])
        assert warm_energy <= split_energy + 1e-12

        cold, _ = solve_hierarchical(h, None, SolverOptions(max_iter=2000, tol=0.0, momentum="none"))
        cold_energy = eval_unified_energy(up, cold.z[0], cold.z[1][0])
        assert cold_energy <= split_energy + 1e-9

    def test_capped_momentum_clamps_r(self, rng):
        p = random_lasso(rng)
        h = sparse_coding_energy(p)
        _, trace = solve_hierarchical(
            h, None, SolverOptions(max_iter=50, tol=0.0, momentum="capped", momentum_cap=0.35)
        )
        assert len(trace.r_history) == 50
        assert max(trace.r_history) <= 0.35
        _, trace_f = solve_hierarchical(h, None, SolverOptions(max_iter=50, tol=0.0, momentum="fista"))
        assert max(trace_f.r_history) > 0.35

    def test_nonneg_layer_stays_feasible(self, rng):
        for momentum in ("none", "fista"):
            A = random_dictionary(rng, 8, 5, nonneg=True)
            z_star = np.abs(rng.standard_normal(8)) * 2
            h = invariant_energy(InvariantProblem(A, z_star, 0.5, 0.05))
            state, _ = solve_hierarchical(h, None, SolverOptions(max_iter=100, momentum=momentum))
            assert np.all(state.z[0] >= 0.0)

    def test_curvature_estimates_never_shrink(self, rng):
        p = random_lasso(rng)
        h = sparse_coding_energy(p)
        state, _ = solve_hierarchical(h, None, SolverOptions(max_iter=100, tol=0.0, L0=0.01))
        assert state.L[0] >= 0.01


class TestIterationCost:
    def test_exact_matmul_count_single_layer(self, rng):
        p = random_lasso(rng)
        L_true = float(np.linalg.eigvalsh(p.W.data.T @ p.W.data).max())
        h = sparse_coding_energy(p)
        k = 40
        for momentum in ("none", "fista"):
            _, trace = solve_hierarchical(
                h, None,
                SolverOptions(max_iter=k, tol=0.0, L0=1.05 * L_true, momentum=momentum),
            )
            assert sum(trace.backtracks) == 0
            assert trace.matmuls == 1 + 2 * k

    def test_exact_matmul_count_two_layers(self, rng):
        W = random_dictionary(rng, 6, 9)
        A = random_dictionary(rng, 9, 4, nonneg=True)
        frames = rng.standard_normal((2, 6))
        h = unified_energy(UnifiedProblem(W, A, frames, 0.5, 0.3))
        k = 30
        _, trace = solve_hierarchical(h, None, SolverOptions(max_iter=k, tol=0.0, momentum="none"))
        assert trace.matmuls == 2 + 2 * 2 * k + sum(trace.backtracks)


class TestDescentLemma:
    def test_identity_case_slack_is_half_step_norm(self, rng):
        p = random_lasso(rng, max_rows=10, max_cols=14)
        h = sparse_coding_energy(p)
        zs = [rng.standard_normal(p.W.code_dim)]
        L = shared_backtrack_L(h, zs)
        from sparseinv.solver import _full_step

        stepped = _full_step(h, h.check_state(zs), L)
        holds, slack = check_descent_lemma(h, zs, stepped, L)
        d = stepped[0] - zs[0]
        assert holds
        assert slack == pytest.approx(0.5 * L * float(np.vdot(d, d)), rel=1e-9, abs=1e-12)

    def test_holds_on_single_layer_lasso(self, rng):
        for _ in range(200):
            p = random_lasso(rng, max_rows=10, max_cols=14)
            h = sparse_coding_energy(p)
            zs = [rng.standard_normal(p.W.code_dim)]
            z_hat = [rng.standard_normal(p.W.code_dim)]
            L = shared_backtrack_L(h, zs)
            holds, _ = check_descent_lemma(h, zs, z_hat, L)
            assert holds

    def test_holds_on_separable_two_layer(self, rng):
        for _ in range(200):
            h = separable_two_layer(rng)
            zs = [rng.standard_normal(s) for s in h.shapes]
            z_hat = [rng.standard_normal(s) for s in h.shapes]
            L = shared_backtrack_L(h, zs)
            holds, _ = check_descent_lemma(h, zs, z_hat, L)
            assert holds


class TestSeparableChain:
    def test_energy_is_sum_of_blocks(self, rng):
        h, problems = separable_two_layer(rng, with_problems=True)
        zs = [rng.standard_normal(s) for s in h.shapes]
        want = sum(eval_sparse_energy(p, z) for p, z in zip(problems, zs))
        assert h.energy(zs) == pytest.approx(want, rel=1e-12)

    def test_sweep_solves_both_blocks(self, rng):
        h, problems = separable_two_layer(rng, with_problems=True)
        state, _ = solve_hierarchical(h, None, SolverOptions(max_iter=3000, tol=0.0, momentum="fista"))
        for p, z in zip(problems, state.z):
            z_cd = oracles.cd_lasso(p.W.data, p.x, p.alpha)
            assert eval_sparse_energy(p, z[0]) <= eval_sparse_energy(p, z_cd) + 1e-7


class TestStationarity:
    def test_zero_point_dominated_gradient(self, rng):
        W = random_dictionary(rng, 6, 10)
        x = rng.standard_normal(6)
        alpha = float(np.abs(W.data.T @ x).max()) * 1.01
        h = sparse_coding_energy(SparseCodingProblem(W, x, alpha))
        assert check_stationarity(h, [np.zeros(10)], 0, tol=1e-12)

    def test_converged_solution_is_stationary(self, rng):
        p = random_lasso(rng, max_rows=10, max_cols=16)
        z, _ = solve_lasso(p, SolverOptions(max_iter=5000, tol=0.0, momentum="fista"))
        assert check_stationarity(sparse_coding_energy(p), [z], 0, tol=1e-6)

    def test_random_point_is_not(self, rng):
        p = random_lasso(rng)
        h = sparse_coding_energy(p)
        assert not check_stationarity(h, [rng.standard_normal(p.W.code_dim) + 1.0], 0, tol=1e-6)

    def test_nonneg_variant(self, rng):
        A = random_dictionary(rng, 8, 5, nonneg=True)
        z_star = np.abs(rng.standard_normal(8)) * 3
        p = InvariantProblem(A, z_star, 0.5, 0.2)
        u, _ = solve_invariant(p, SolverOptions(max_iter=5000, tol=0.0, momentum="fista"))
        assert check_stationarity(invariant_energy(p), [u], 0, tol=1e-6)


class TestOptionsValidation:
    def test_eta_must_exceed_one(self):
        with pytest.raises(ValueError):
            SolverOptions(eta=1.0)

    def test_cap_range(self):
        with pytest.raises(ValueError):
            SolverOptions(momentum="capped", momentum_cap=1.0)

    def test_momentum_names(self):
        with pytest.raises(ValueError):
            SolverOptions(momentum="nesterov")
