from __future__ import annotations

import numpy as np
import pytest

from aeot_gan.core import DimensionMismatchError, PointCloud, RngStream, uniform_cube_sample
from aeot_gan.sdot import (
    ADAM_STEP,
    BRUTE_FORCE_MAX,
    CubeScaling,
    DualPotential,
    SdotProblem,
    SolverConfig,
    assign_cell,
    assign_cells,
    dual_gradient,
    dual_objective,
    estimate_cell_stats,
    from_checkpoint,
    solve,
    to_checkpoint,
)


def dense_grid(count: int) -> np.ndarray:
    return ((np.arange(count) + 0.5) / count)[:, None]


def brute_force_cells(w: np.ndarray, problem: SdotProblem, h: np.ndarray) -> np.ndarray:
    scores = 0.5 * ((w[:, None, :] - problem.targets.points[None, :, :]) ** 2).sum(axis=2) - h[None, :]
    return np.argmin(scores, axis=1)


class TestProblem:
    def test_default_weights_uniform(self):
        p = SdotProblem(PointCloud(np.zeros((4, 2))))
        np.testing.assert_allclose(p.weights, 0.25)

    @pytest.mark.parametrize("weights", [[0.5, 0.6], [1.0, 0.0], [0.5]])
    def test_rejects_bad_weights(self, weights):
        with pytest.raises(ValueError):
            SdotProblem(PointCloud([[0.0], [1.0]]), np.asarray(weights))

    def test_potential_is_gauge_fixed(self):
        h = DualPotential(np.array([1.0, 2.0, 6.0]))
        assert h.h.sum() == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(np.diff(h.h), [1.0, 4.0])


class TestAssignCell:
    def test_nearest_point_at_equal_potentials(self, line_problem):
        assert assign_cell([0.3], line_problem, np.array([0.0, 0.0])) == 0

    def test_potential_moves_boundary_to_point_nine(self, line_problem):
        h = np.array([0.2, 0.0])
        assert assign_cell([0.8], line_problem, h) == 0
        assert assign_cell([0.89], line_problem, h) == 0
        assert assign_cell([0.91], line_problem, h) == 1

    def test_tie_goes_to_lowest_index(self, line_problem):
        assert assign_cell([0.5], line_problem, np.array([0.0, 0.0])) == 0

    def test_gauge_invariance(self, rng):
        gen = rng.generator()
        problem = SdotProblem(PointCloud(gen.random((8, 2))))
        h = 0.05 * gen.normal(size=8)
        for w in gen.random((200, 2)):
            assert assign_cell(w, problem, h) == assign_cell(w, problem, h + 3.7)

    def test_dimension_mismatch(self, line_problem):
        with pytest.raises(DimensionMismatchError):
            assign_cell([0.1, 0.2], line_problem, np.zeros(2))

    def test_batched_tree_matches_brute_force(self, rng):
        gen = rng.generator()
        problem = SdotProblem(PointCloud(gen.random((100, 2))))
        h = 0.01 * gen.normal(size=100)
        w = gen.random((2000, 2))
        scores = 0.5 * ((w[:, None, :] - problem.targets.points[None, :, :]) ** 2).sum(axis=2) - h[None, :]
        np.testing.assert_array_equal(assign_cells(w, problem, h), np.argmin(scores, axis=1))

    @pytest.mark.parametrize("tied", [3, 4])
    def test_multi_way_tie_on_tree_path(self, tied, rng):
        gen = rng.generator()
        n = BRUTE_FORCE_MAX + 36
        center = np.array([0.5, 0.5])
        fillers = gen.random((4 * n, 2))
        fillers = fillers[np.linalg.norm(fillers - center, axis=1) > 0.35][:n]
        z = fillers.copy()
        # equidistant from the center, exact in binary
        sites = np.array([[0.5, 0.75], [0.5, 0.25], [0.75, 0.5], [0.25, 0.5]])[:tied]
        slots = np.array([83, 40, 17, 66])[:tied]
        z[slots] = sites
        problem = SdotProblem(PointCloud(z))
        h = np.zeros(n)
        assert assign_cells(center[None, :], problem, h)[0] == slots.min()
        w = np.vstack([center, gen.random((500, 2))])
        np.testing.assert_array_equal(assign_cells(w, problem, h), brute_force_cells(w, problem, h))


class TestDual:
    def test_single_cell_objective_ignores_h(self, rng):
        problem = SdotProblem(PointCloud([[0.4, 0.6]]))
        w = uniform_cube_sample(rng, 2, 500)
        expected = float(np.mean(0.5 * ((w - [0.4, 0.6]) ** 2).sum(axis=1)))
        for h in (0.0, 1.5, -3.0):
            assert dual_objective(problem, np.array([h]), w) == pytest.approx(expected, abs=1e-12)

    def test_objective_shift_invariant(self, rng):
        gen = rng.generator()
        problem = SdotProblem(PointCloud(gen.random((6, 2))))
        h = 0.1 * gen.normal(size=6)
        w = gen.random((1000, 2))
        assert dual_objective(problem, h + 2.5, w) == pytest.approx(dual_objective(problem, h, w), abs=1e-12)

    def test_objective_closed_form(self, line_problem):
        # two halves of 1/192 each
        value = dual_objective(line_problem, np.zeros(2), dense_grid(100_000))
        assert value == pytest.approx(1.0 / 96.0, abs=1e-8)

    def test_gradient_symmetric_targets(self, line_problem):
        g = dual_gradient(line_problem, np.zeros(2), dense_grid(10_000))
        np.testing.assert_allclose(g, [0.0, 0.0], atol=1e-12)

    def test_gradient_analytic_cell_measure(self, line_problem):
        g = dual_gradient(line_problem, np.array([0.2, 0.0]), dense_grid(100_000))
        np.testing.assert_allclose(g, [-0.4, 0.4], atol=1e-9)
        assert g.sum() == pytest.approx(0.0, abs=1e-15)

    def test_gradient_matches_finite_differences(self, rng):
        gen = rng.generator()
        problem = SdotProblem(PointCloud(gen.random((5, 2))))
        h = 0.01 * gen.normal(size=5)
        w = gen.random((2000, 2))
        g = dual_gradient(problem, h, w)
        step = 1e-7
        for i in range(5):
            e = np.zeros(5)
            e[i] = step
            fd = (dual_objective(problem, h + e, w) - dual_objective(problem, h - e, w)) / (2 * step)
            assert g[i] == pytest.approx(fd, abs=1e-6)

    def test_ascent_does_not_lower_held_out_objective(self, rng):
        gen = rng.spawn(4).generator()
        problem = SdotProblem(PointCloud(gen.random((5, 2))))
        train = uniform_cube_sample(rng.spawn(5), 2, 100_000)
        held_out = uniform_cube_sample(rng.spawn(6), 2, 100_000)
        h = np.zeros(5)
        values = [dual_objective(problem, h, held_out)]
        for _ in range(60):
            h = h + 0.02 * dual_gradient(problem, h, train)
            values.append(dual_objective(problem, h, held_out))
        assert np.all(np.diff(values) >= -1e-5)
        assert values[-1] > values[0]


class TestCubeScaling:
    def test_fit_places_points_inside_margin(self, rng):
        pts = PointCloud(3.0 + 4.0 * rng.generator().random((30, 3)) * [1.0, 0.5, 0.25])
        scaling = CubeScaling.fit(pts, 0.05)
        out = scaling.apply(pts).points
        assert out.min() >= 0.05 - 1e-12 and out.max() <= 0.95 + 1e-12
        assert float(np.max(out.max(axis=0) - out.min(axis=0))) == pytest.approx(0.9)
        np.testing.assert_allclose(0.5 * (out.max(axis=0) + out.min(axis=0)), 0.5, atol=1e-12)

    def test_single_point_goes_to_center(self):
        scaling = CubeScaling.fit(PointCloud([[4.0, -2.0]]))
        np.testing.assert_allclose(scaling.apply(PointCloud([[4.0, -2.0]])).points, [[0.5, 0.5]])

    def test_checks(self):
        with pytest.raises(ValueError):
            CubeScaling.fit(PointCloud([[0.0]]), 0.5)
        with pytest.raises(DimensionMismatchError):
            CubeScaling.identity(2).apply(PointCloud([[0.1, 0.2, 0.3]]))
        scaling = CubeScaling.fit(PointCloud([[0.0, 1.0], [2.0, 5.0]]))
        back = CubeScaling.from_json(scaling.to_json())
        np.testing.assert_array_equal(back.center, scaling.center)
        assert back.scale == scaling.scale

    def test_far_codes_leave_no_empty_cell_after_scaling(self, rng):
        codes = PointCloud(3.0 + 4.0 * rng.generator().random((20, 2)))
        raw = estimate_cell_stats(SdotProblem(codes), np.zeros(20), 100_000, rng.spawn(1))
        assert raw.empty_count > 0
        scaled = SdotProblem(CubeScaling.fit(codes).apply(codes))
        stats = estimate_cell_stats(scaled, np.zeros(20), 100_000, rng.spawn(1))
        assert stats.empty_count == 0 and stats.all_defined


class TestCellStats:
    def test_half_line_barycenters(self, line_problem, rng):
        stats = estimate_cell_stats(line_problem, np.zeros(2), 100_000, rng)
        np.testing.assert_allclose(stats.barycenters[:, 0], [0.25, 0.75], atol=0.005)
        np.testing.assert_allclose(stats.measures, [0.5, 0.5], atol=0.01)
        assert stats.all_defined

    def test_single_cell_centroid(self, rng):
        problem = SdotProblem(PointCloud([[0.9, 0.1, 0.3]]))
        stats = estimate_cell_stats(problem, np.zeros(1), 50_000, rng)
        assert stats.measures[0] == 1.0
        np.testing.assert_allclose(stats.barycenters[0], [0.5, 0.5, 0.5], atol=0.01)

    def test_empty_cell_has_no_barycenter(self, line_problem, rng):
        stats = estimate_cell_stats(line_problem, np.array([10.0, 0.0]), 1000, rng)
        assert stats.counts[1] == 0
        assert np.all(np.isnan(stats.barycenters[1]))
        with pytest.raises(ValueError):
            stats.barycenter_cloud()

    def test_needs_at_least_n_samples(self, line_problem, rng):
        with pytest.raises(ValueError):
            estimate_cell_stats(line_problem, np.zeros(2), 1, rng)

    def test_worker_count_does_not_change_result(self, rng):
        problem = SdotProblem(PointCloud(rng.spawn(9).generator().random((80, 2))))
        a = estimate_cell_stats(problem, np.zeros(80), 20_000, rng, chunk_size=3000, workers=1)
        b = estimate_cell_stats(problem, np.zeros(80), 20_000, rng, chunk_size=3000, workers=4)
        np.testing.assert_array_equal(a.counts, b.counts)
        np.testing.assert_array_equal(a.barycenters, b.barycenters)

    def test_standard_error_shrinks_with_samples(self, line_problem):
        def spread(count: int) -> float:
            vals = [estimate_cell_stats(line_problem, np.zeros(2), count, RngStream(seed=s)).measures[0] for s in range(40)]
            return float(np.std(vals))

        ratio = spread(8000) / spread(2000)
        assert 0.3 < ratio < 0.75


class TestSolve:
    def test_single_target(self, rng):
        problem = SdotProblem(PointCloud([[0.2, 0.9]]))
        res = solve(problem, SolverConfig(mc_samples=1000, max_iterations=5, verify_samples=20_000), rng)
        assert res.converged
        np.testing.assert_array_equal(res.potential.h, [0.0])
        assert res.stats.measures[0] == 1.0
        np.testing.assert_allclose(res.stats.barycenters[0], [0.5, 0.5], atol=0.01)

    def test_mirror_symmetric_targets(self, rng):
        problem = SdotProblem(PointCloud([[0.25, 0.5], [0.75, 0.5]]))
        potential, stats = solve(problem, SolverConfig(mc_samples=10_000, max_iterations=200, verify_samples=100_000), rng)
        assert np.all(np.abs(potential.h) < 0.05)
        np.testing.assert_allclose(stats.measures, [0.5, 0.5], atol=0.02)

    def test_same_seed_same_potential(self, rng):
        problem = SdotProblem(PointCloud(rng.spawn(3).generator().random((6, 2))))
        cfg = SolverConfig(mc_samples=5000, max_iterations=30, verify_samples=10_000)
        a, b = solve(problem, cfg, rng), solve(problem, cfg, rng)
        np.testing.assert_array_equal(a.potential.h, b.potential.h)
        assert a.iterations == b.iterations
        assert [r.max_deviation for r in a.history] == [r.max_deviation for r in b.history]

    def test_rejects_too_few_samples(self, line_problem, rng):
        with pytest.raises(ValueError):
            solve(line_problem, SolverConfig(mc_samples=5), rng)

    def test_checkpoint_round_trip(self, line_problem, rng):
        res = solve(line_problem, SolverConfig(mc_samples=5000, max_iterations=50, verify_samples=20_000), rng)
        potential, stats, converged = from_checkpoint(to_checkpoint(line_problem, res, epsilon=0.3, seed=7))
        np.testing.assert_array_equal(potential.h, res.potential.h)
        np.testing.assert_array_equal(stats.barycenters, res.stats.barycenters)
        assert converged == res.converged

    def test_checkpoint_keeps_scaling(self, line_problem, rng):
        res = solve(line_problem, SolverConfig(mc_samples=5000, max_iterations=20, verify_samples=20_000), rng)
        scaling = CubeScaling.fit(PointCloud([[2.0], [6.0]]), 0.25)
        d = to_checkpoint(line_problem, res, epsilon=0.3, seed=7, scaling=scaling)
        assert CubeScaling.from_json(d["scaling"]).scale == pytest.approx(0.125)
        assert to_checkpoint(line_problem, res, epsilon=0.3, seed=7)["scaling"] is None

    def test_default_steps(self):
        assert SolverConfig().resolved_step(500) == ADAM_STEP
        assert SolverConfig(optimizer="sgd").resolved_step(500) == 0.25
        assert SolverConfig().resolved_tolerance(500) == pytest.approx(0.2 / 500)
        with pytest.raises(ValueError):
            SolverConfig(patience=0).validate(2)

    @pytest.mark.slow
    def test_far_codes_reach_uniform_masses_once_scaled(self, rng):
        codes = PointCloud(3.0 + 4.0 * rng.spawn(8).generator().random((30, 2)))
        problem = SdotProblem(CubeScaling.fit(codes).apply(codes))
        cfg = SolverConfig()
        res = solve(problem, cfg, rng)
        assert res.converged and res.stats.empty_count == 0
        fresh = estimate_cell_stats(problem, res.potential, 1_000_000, RngStream(seed=999))
        bound = cfg.resolved_tolerance(30) + 4.0 * np.sqrt((1.0 / 30) / 1_000_000)
        assert np.all(np.abs(fresh.measures - 1.0 / 30) <= bound)

    @pytest.mark.slow
    def test_random_targets_reach_tolerance(self, rng):
        problem = SdotProblem(PointCloud(rng.spawn(5).generator().random((10, 2))))
        cfg = SolverConfig(mc_samples=100_000, tolerance=0.01, verify_samples=200_000)
        res = solve(problem, cfg, rng)
        assert res.converged
        fresh = estimate_cell_stats(problem, res.potential, 1_000_000, RngStream(seed=12345))
        assert fresh.max_deviation(problem.weights) <= 0.013
