import os
import shutil
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pandas as pd

from gne.cournot import CournotParams, generate
from gne.errors import (
    ConfigurationError,
    DivergenceError,
    SolverPrerequisiteError,
    StepSizeRejectedError,
)
from gne.model import kkt_residual
from gne.solvers import (
    STATUS_CONVERGED_FP,
    STATUS_CONVERGED_KKT,
    STATUS_MAX_ITERS,
    TRACE_COLUMNS,
    SolverKind,
    StopRule,
    check_steps,
    default_initial_iterate,
    fbhf_step_bound,
    fixed_point_residual,
    prepare,
    relative_distance,
    select_steps_fb,
    select_steps_fbf,
    select_steps_fbhf,
    solve,
    step_fb,
    step_fbf,
    step_fbhf,
)
from gne.splitting import (
    ConstantsBundle,
    Iterate,
    Splitting,
    StepConfig,
    build_phi_fb,
    compute_constants,
    dense_phi_fb,
)
from tests.instances import scalar_game, single_node, skew_game, small_cournot, trivial_game

ALL_KINDS = ("fb", "fbf", "fbhf")


def bundle(L_A=1.0, L_B=0.0, theta=None):
    return ConstantsBundle(beta=1.0, eta=0.0 if theta is None else 1.0, kappa=0.0, delta_deg=0.0,
                           a_norm=0.0, L_A=L_A, L_B=L_B, L_D=L_A + L_B, theta=theta)


def project(game, w):
    n, mN = game.n, game.m * game.n_agents
    return np.concatenate([np.clip(w[:n], game.lower, game.upper), w[n:n + mN],
                           np.maximum(w[n + mN:], 0.0)])


def random_start(game, seed):
    rng = np.random.default_rng(seed)
    mN = game.m * game.n_agents
    x = rng.uniform(game.lower, game.upper)
    return Iterate(x, rng.standard_normal(mN), np.abs(rng.standard_normal(mN)))


class TestStepSelection(unittest.TestCase):
    def test_fbf_rule(self):
        np.testing.assert_allclose(select_steps_fbf(bundle(L_A=1.0), 3).rho, [0.99] * 3)
        steps = select_steps_fbf(bundle(L_A=2.0, L_B=2.0), 2)
        np.testing.assert_allclose(steps.tau, [0.2475, 0.2475])

    def test_fbhf_rule(self):
        c = bundle(L_A=1.0, L_B=1.0, theta=0.25)
        self.assertEqual(fbhf_step_bound(c), 0.5)
        np.testing.assert_allclose(select_steps_fbhf(c, 2).sigma, [0.495, 0.495])
        self.assertEqual(fbhf_step_bound(bundle(L_A=1.0, L_B=0.0, theta=0.25)), 0.5)

    def test_fbhf_needs_theta(self):
        with self.assertRaises(SolverPrerequisiteError):
            fbhf_step_bound(bundle())

    def test_safety_range(self):
        with self.assertRaises(ConfigurationError):
            select_steps_fbf(bundle(), 1, safety=1.0)

    def test_fb_without_coupling(self):
        game = scalar_game(0.01, 0.0, A=0.0)
        graph = single_node()
        steps = select_steps_fb(game, graph, compute_constants(game, graph), margin=1e-2)
        for values in (steps.rho, steps.sigma, steps.tau):
            self.assertAlmostEqual(values[0], 100.0, places=9)

    def test_fb_shift_meets_cocoercivity(self):
        game, graph = small_cournot()
        c = compute_constants(game, graph)
        steps = select_steps_fb(game, graph, c)
        cert = build_phi_fb(steps, game, graph)
        self.assertGreater(cert.min_eigenvalue * c.theta, 0.5)

    def test_fb_shift_stops_just_past_threshold(self):
        game = trivial_game()
        c = compute_constants(game, single_node())
        self.assertEqual(c.theta, 1.0)
        steps = select_steps_fb(game, single_node(), c, margin=1e-2)
        # Gershgorin gives λ_min = 0.01; the shift adds 0.5 to every inverse step
        np.testing.assert_allclose(steps.rho, [1.0 / 1.51])
        np.testing.assert_allclose(steps.sigma, [1.0 / 0.51])
        np.testing.assert_allclose(steps.tau, [1.0 / 1.51])
        cert = build_phi_fb(steps, game, single_node())
        self.assertAlmostEqual(cert.min_eigenvalue * c.theta, 0.51, places=10)

    def test_cournot_bounds(self):
        game, graph = small_cournot()
        c = compute_constants(game, graph)
        fbf = select_steps_fbf(c, game.n_agents)
        fbhf = select_steps_fbhf(c, game.n_agents)
        self.assertAlmostEqual(fbf.psi_inv_norm * c.L_D, 0.99, places=12)
        self.assertLessEqual(fbhf.psi_inv_norm, min(2 * c.theta, 1 / c.L_B))
        self.assertGreater(1 / c.L_B, 1 / c.L_D)
        if 2 * c.theta >= 1 / c.L_D:
            self.assertGreaterEqual(fbhf.psi_inv_norm, fbf.psi_inv_norm)

    def test_prerequisites_on_skew_game(self):
        game, graph = skew_game()
        c = compute_constants(game, graph)
        with self.assertRaises(SolverPrerequisiteError):
            select_steps_fb(game, graph, c)
        with self.assertRaises(SolverPrerequisiteError):
            prepare(game, graph, "fbhf")
        with self.assertRaises(SolverPrerequisiteError):
            check_steps("fb", StepConfig.uniform(0.1, 2), game, graph, c)

    def test_explicit_steps_checked(self):
        game, graph = small_cournot()
        c = compute_constants(game, graph)
        with self.assertRaises(ConfigurationError):
            check_steps("fbf", StepConfig.uniform(1.01 / c.L_D, game.n_agents), game, graph, c)
        with self.assertRaises(ConfigurationError):
            check_steps("fbhf", StepConfig.uniform(1.01 * fbhf_step_bound(c), game.n_agents), game, graph, c)
        with self.assertRaises(StepSizeRejectedError):
            check_steps("fb", StepConfig.uniform(1e6, game.n_agents), game, graph, c)

    def test_non_monotone_game_rejected(self):
        game = scalar_game(-1.0, 0.0, A=1.0, b=1.0, lower=-1.0, upper=1.0)
        self.assertFalse(game.monotone)
        for kind in ALL_KINDS:
            with self.subTest(kind=kind):
                with self.assertRaises(SolverPrerequisiteError):
                    prepare(game, single_node(), kind)

    def test_force_warns_only_when_a_check_fails(self):
        game, graph = skew_game()
        with patch("gne.solvers.logger") as logger:
            prepare(game, graph, "fb", steps=StepConfig.uniform(0.1, 2), force=True)
        logger.warning.assert_called_once()
        self.assertIn("requires a strongly monotone", logger.warning.call_args[0][0])

        game, graph = small_cournot()
        with patch("gne.solvers.logger") as logger:
            for kind in ALL_KINDS:
                prepare(game, graph, kind, steps=StepConfig.uniform(1e-3, game.n_agents), force=True)
        logger.warning.assert_not_called()

    def test_force_needs_explicit_steps(self):
        game, graph = skew_game()
        with self.assertRaises(SolverPrerequisiteError):
            prepare(game, graph, "fbhf", force=True)

    def test_unknown_solver(self):
        with self.assertRaises(ConfigurationError):
            SolverKind.parse("golden-ratio")
        self.assertIs(SolverKind.parse(" FBF "), SolverKind.FBF)


class TestStopRule(unittest.TestCase):
    def test_needs_a_criterion(self):
        with self.assertRaises(ConfigurationError):
            StopRule(fp_tol=None)

    def test_status(self):
        rule = StopRule(fp_tol=1e-6, kkt_tol=1e-5)
        self.assertIsNone(rule.status(1e-7, 1e-4))
        self.assertEqual(rule.status(1e-7, 1e-6), STATUS_CONVERGED_KKT)
        self.assertEqual(StopRule(fp_tol=1e-6).status(1e-7, 1.0), STATUS_CONVERGED_FP)
        self.assertIsNone(StopRule(fp_tol=None, max_iters=3).status(0.0, 0.0))
        self.assertEqual(list(StopRule(max_iters=3).iterations()), [1, 2, 3])


class TestSingleSteps(unittest.TestCase):
    """Each step map against a dense evaluation of its operator form."""

    def setUp(self):
        self.game, self.graph = small_cournot()
        self.s = Splitting(self.game, self.graph)
        self.A_mat, self.offset = self.s.dense_operator_A()
        self.B_mat = self.s.dense_operator_B()
        self.steps = StepConfig.uniform(0.05, self.game.n_agents)
        self.psi = np.concatenate(self.steps.expanded(self.game.dims, self.game.m))
        self.starts = [default_initial_iterate(self.game), random_start(self.game, 4)]

    def test_fbf(self):
        D = self.A_mat + self.B_mat
        for u in self.starts:
            v = u.stack()
            tilde = project(self.game, v - self.psi * (D @ v + self.offset))
            expected = tilde + self.psi * (D @ (v - tilde))
            v_next, u_half = step_fbf(self.s, u, self.steps)
            np.testing.assert_allclose(u_half.stack(), tilde, atol=1e-12)
            np.testing.assert_allclose(v_next.stack(), expected, atol=1e-12)

    def test_fbhf(self):
        for u in self.starts:
            v = u.stack()
            tilde = project(self.game, v - self.psi * ((self.A_mat + self.B_mat) @ v + self.offset))
            expected = tilde + self.psi * (self.B_mat @ (v - tilde))
            v_next, _ = step_fbhf(self.s, u, self.steps)
            np.testing.assert_allclose(v_next.stack(), expected, atol=1e-12)

    def test_fb_satisfies_preconditioned_inclusion(self):
        game = self.game
        n, mN = game.n, game.m * game.n_agents
        phi = dense_phi_fb(self.steps, game, self.graph)
        for u in self.starts:
            u_next = step_fb(self.s, u, self.steps)
            w = u.stack()
            w_next = u_next.stack()
            r = phi @ (w - w_next) - (self.A_mat @ w + self.offset) - self.B_mat @ w_next
            x_next = w_next[:n]
            at_lower = np.isclose(x_next, game.lower)
            at_upper = np.isclose(x_next, game.upper)
            interior = ~(at_lower | at_upper)
            np.testing.assert_allclose(r[:n][interior], 0.0, atol=1e-10)
            self.assertTrue(np.all(r[:n][at_lower] <= 1e-10))
            self.assertTrue(np.all(r[:n][at_upper] >= -1e-10))
            np.testing.assert_allclose(r[n:n + mN], 0.0, atol=1e-10)
            lam_next = w_next[n + mN:]
            np.testing.assert_allclose(r[n + mN:][lam_next > 0], 0.0, atol=1e-10)
            self.assertTrue(np.all(r[n + mN:][lam_next == 0] <= 1e-10))

    def test_skew_fbf_step(self):
        game, graph = skew_game()
        s = Splitting(game, graph)
        steps = StepConfig.uniform(0.5, 2)
        A_mat, offset = s.dense_operator_A()
        D = A_mat + s.dense_operator_B()
        v = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        tilde = project(game, v - 0.5 * (D @ v + offset))
        expected = tilde + 0.5 * (D @ (v - tilde))
        v_next, _ = step_fbf(s, Iterate.from_stacked(v, 2, 2), steps)
        np.testing.assert_allclose(v_next.stack(), expected, atol=1e-15)

    def test_zero_operator_reduces_to_resolvent(self):
        game = scalar_game(0.0, 0.0, A=0.0, b=0.0)
        s = Splitting(game, single_node())
        steps = StepConfig.uniform(0.3, 1)
        v = Iterate(np.array([2.0]), np.array([-1.0]), np.array([-0.4]))
        v_next, _ = step_fbf(s, v, steps)
        np.testing.assert_allclose(v_next.stack(), [2.0, -1.0, 0.0])

    def test_fbhf_without_B_is_forward_backward(self):
        game = scalar_game(2.0, -1.0, A=0.0, b=1.0, lower=0.0, upper=1.0)
        s = Splitting(game, single_node())
        steps = StepConfig.uniform(0.2, 1)
        v = Iterate(np.array([0.9]), np.array([0.0]), np.array([0.3]))
        v_next, u_half = step_fbhf(s, v, steps)
        np.testing.assert_allclose(v_next.stack(), u_half.stack())
        np.testing.assert_allclose(v_next.x, np.clip(0.9 - 0.2 * (2 * 0.9 - 1), 0, 1))
        np.testing.assert_allclose(v_next.lam, [max(0.0, 0.3 - 0.2 * 1.0)])

    def test_fixed_point_is_kept(self):
        game = trivial_game()
        s = Splitting(game, single_node())
        u_star = Iterate(np.array([1.0]), np.zeros(1), np.zeros(1))
        for step in (step_fbhf, step_fbf):
            v_next, _ = step(s, u_star, StepConfig.uniform(0.3, 1))
            np.testing.assert_allclose(v_next.stack(), u_star.stack(), atol=1e-15)
        np.testing.assert_allclose(step_fb(s, u_star, StepConfig.uniform(0.3, 1)).stack(),
                                   u_star.stack(), atol=1e-15)


class TestSolve(unittest.TestCase):
    def test_trivial_instance_all_solvers(self):
        game = trivial_game()
        for kind in ALL_KINDS:
            with self.subTest(kind=kind):
                u, trace, status = solve(game, single_node(), kind,
                                         StopRule(fp_tol=None, kkt_tol=1e-8, max_iters=10000))
                self.assertEqual(status, STATUS_CONVERGED_KKT)
                self.assertAlmostEqual(u.x[0], 1.0, delta=1e-7)
                self.assertLessEqual(trace.last()["kkt_stat"], 1e-8)

    def test_fb_unconstrained_quadratic(self):
        game = scalar_game(1.0, -1.0, A=0.0, b=1.0)
        u, trace, status = solve(game, single_node(), "fb", StopRule(fp_tol=1e-10, max_iters=200))
        self.assertEqual(status, STATUS_CONVERGED_FP)
        self.assertAlmostEqual(u.x[0], 1.0, delta=1e-9)

    def test_skew_game_fbf_converges(self):
        game, graph = skew_game()
        u0 = Iterate(np.array([1.0, 0.0]), np.zeros(2), np.zeros(2))
        u, trace, status = solve(game, graph, "fbf", StopRule(fp_tol=1e-6, max_iters=20000), u0=u0)
        self.assertEqual(status, STATUS_CONVERGED_FP)
        self.assertLess(np.linalg.norm(u.x), 1e-4)

    def test_skew_game_forced_fb_does_not_contract(self):
        game, graph = skew_game()
        u0 = Iterate(np.array([1.0, 0.0]), np.zeros(2), np.zeros(2))
        norms = [np.linalg.norm(u0.x)]
        _, _, status = solve(game, graph, "fb", StopRule(fp_tol=None, max_iters=1000), u0=u0,
                             steps=StepConfig.uniform(0.1, 2), force=True,
                             callback=lambda k, u, half: norms.append(np.linalg.norm(u.x)))
        self.assertEqual(status, STATUS_MAX_ITERS)
        self.assertEqual(len(norms), 1001)
        self.assertTrue(all(b >= a for a, b in zip(norms, norms[1:])))
        self.assertAlmostEqual(norms[1] ** 2, 1.01, places=12)
        # x* = 0, so the norm is the distance to the solution
        self.assertGreaterEqual(norms[-1], norms[0])
        self.assertAlmostEqual(norms[-1] ** 2 / 1.01 ** 1000, 1.0, places=6)

    def test_divergence(self):
        game, graph = skew_game()
        u0 = Iterate(np.array([1.0, 0.0]), np.zeros(2), np.zeros(2))
        with np.errstate(over="ignore", invalid="ignore"):
            with self.assertRaises(DivergenceError) as ctx:
                solve(game, graph, "fb", StopRule(fp_tol=None, max_iters=1000), u0=u0,
                      steps=StepConfig.uniform(1e3, 2), force=True)
        self.assertGreater(ctx.exception.iteration, 1)
        self.assertTrue(ctx.exception.last_finite.is_finite())

    def test_gradient_accounting(self):
        game, graph = small_cournot()
        for kind in ALL_KINDS:
            with self.subTest(kind=kind):
                _, trace, _ = solve(game, graph, kind, StopRule(fp_tol=None, max_iters=25))
                per_iteration = SolverKind.parse(kind).grad_evals_per_iteration
                np.testing.assert_array_equal(trace.column("grad_evals"),
                                              per_iteration * trace.column("iter"))
                np.testing.assert_array_equal(trace.column("comm_rounds"), 2 * trace.column("iter"))

    def test_fejer_monotone(self):
        cases = [
            ("fbf", trivial_game(), single_node(), Iterate(np.array([1.0]), np.zeros(1), np.zeros(1)),
             Iterate(np.array([-3.0]), np.array([0.5]), np.array([2.0]))),
            ("fbhf", trivial_game(), single_node(), Iterate(np.array([1.0]), np.zeros(1), np.zeros(1)),
             Iterate(np.array([-3.0]), np.array([0.5]), np.array([2.0]))),
            ("fbf", *skew_game(), Iterate(np.zeros(2), np.zeros(2), np.zeros(2)),
             Iterate(np.array([1.0, -0.5]), np.zeros(2), np.zeros(2))),
        ]
        for kind, game, graph, u_star, u0 in cases:
            with self.subTest(kind=kind, game=game.n_agents):
                _, steps = prepare(game, graph, kind)
                s = Splitting(game, graph)
                dists = [s.psi_norm(steps, u0 - u_star)]
                solve(game, graph, kind, StopRule(fp_tol=None, max_iters=300), u0=u0, steps=steps,
                      callback=lambda k, u, half: dists.append(s.psi_norm(steps, u - u_star)))
                for before, after in zip(dists, dists[1:]):
                    self.assertLessEqual(after, before + 1e-10)

    def test_fejer_monotone_on_cournot(self):
        game, graph = small_cournot()
        u_star, _, _ = solve(game, graph, "fbf", StopRule(fp_tol=1e-12, max_iters=400000))
        s = Splitting(game, graph)
        for kind in ("fbf", "fbhf"):
            with self.subTest(kind=kind):
                _, steps = prepare(game, graph, kind)
                u0 = default_initial_iterate(game)
                dists = [s.psi_norm(steps, u0 - u_star)]
                solve(game, graph, kind, StopRule(fp_tol=None, max_iters=500), u0=u0, steps=steps,
                      callback=lambda k, u, half: dists.append(s.psi_norm(steps, u - u_star)))
                self.assertLess(dists[-1], dists[0])
                for before, after in zip(dists, dists[1:]):
                    self.assertLessEqual(after, before + 1e-10)

    def test_fixed_point_and_kkt_at_solution(self):
        game, graph = small_cournot()
        fp_tol, kkt_tol = 1e-10, 1e-8
        u, _, status = solve(game, graph, "fbf", StopRule(fp_tol=fp_tol, kkt_tol=kkt_tol, max_iters=200000))
        self.assertEqual(status, STATUS_CONVERGED_KKT)
        scale = max(1.0, u.norm())
        for kind in ("fbf", "fbhf"):
            _, steps = prepare(game, graph, kind)
            self.assertLessEqual(fixed_point_residual(game, graph, kind, u, steps), 10 * fp_tol * scale)
        kkt = kkt_residual(game, u.x, np.maximum(u.lam, 0.0), graph)
        self.assertLessEqual(kkt.max(), 10 * kkt_tol)
        self.assertLessEqual(kkt.dual_consensus, 10 * kkt_tol)
        lam = u.lam.reshape(game.n_agents, game.m)
        self.assertLessEqual(np.abs(lam - lam.mean(axis=0)).max(), 1e-6)

    def test_cross_solver_agreement(self):
        game, graph = small_cournot(seed=2)
        u_ref, _, status = solve(game, graph, "fbf", StopRule(fp_tol=1e-10, max_iters=200000))
        self.assertEqual(status, STATUS_CONVERGED_FP)
        for kind in ("fb", "fbhf"):
            with self.subTest(kind=kind):
                u, trace, status = solve(game, graph, kind, StopRule(fp_tol=1e-10, max_iters=200000),
                                         reference=u_ref.x)
                self.assertEqual(status, STATUS_CONVERGED_FP)
                self.assertLessEqual(trace.last()["rel_dist"], 1e-4)
                self.assertLessEqual(relative_distance(u.x, u_ref.x), 1e-4)


class TestTraceExport(unittest.TestCase):
    def setUp(self):
        self.test_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_csv_layout(self):
        game, graph = small_cournot()
        _, trace, _ = solve(game, graph, "fbhf", StopRule(fp_tol=None, max_iters=10))
        path = trace.to_csv(self.test_dir / "trace.csv")
        raw = Path(path).read_bytes()
        self.assertNotIn(b"\r\n", raw)
        self.assertEqual(raw.decode().splitlines()[0], ",".join(TRACE_COLUMNS))
        frame = pd.read_csv(path)
        self.assertEqual(len(frame), 10)
        self.assertTrue(frame["rel_dist"].isna().all())
        self.assertFalse(frame["fp_res"].isna().any())


class TestDefaultCournotAgreement(unittest.TestCase):
    """Seeded 20-firm, 7-market instance against a tight FBF reference."""

    @classmethod
    def setUpClass(cls):
        cls.game, cls.graph = generate(CournotParams(seed=1))
        u_ref, _, _ = solve(cls.game, cls.graph, "fbf", StopRule(fp_tol=1e-10, max_iters=200000))
        cls.x_ref = u_ref.x

    def reaches_reference(self, kind):
        _, trace, _ = solve(self.game, self.graph, kind, StopRule(fp_tol=None, max_iters=50000),
                            reference=self.x_ref)
        self.assertLessEqual(trace.last()["rel_dist"], 1e-4)

    def test_fb_reaches_reference(self):
        self.reaches_reference("fb")

    @unittest.skipUnless(os.getenv("GNE_SLOW_TESTS"), "set GNE_SLOW_TESTS=1 for the FBF and FBHF runs")
    def test_fbf_and_fbhf_reach_reference(self):
        for kind in ("fbf", "fbhf"):
            with self.subTest(kind=kind):
                self.reaches_reference(kind)


if __name__ == "__main__":
    unittest.main()
