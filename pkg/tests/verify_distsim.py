import shutil
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pandas as pd

from gne.distsim import (
    AgentState,
    RoundSchedule,
    build_agents,
    locality_audit,
    run_distributed,
)
from gne.errors import AuditFailure
from gne.solvers import StopRule, default_initial_iterate, prepare, solve
from gne.splitting import Iterate, StepConfig
from tests.instances import scalar_game, single_node, small_cournot, trivial_game

ALL_KINDS = ("fb", "fbf", "fbhf")


def collect(store):
    def callback(k, u_next, u_half):
        store.append(u_next.stack())
    return callback


class MisWiredAgent(AgentState):
    """Also sums its Laplacian over agent 2, which it was never wired to."""

    def laplacian(self, rnd, phase, name, own):
        out = super().laplacian(rnd, phase, name, own)
        return out + (own - self.inbox.read(rnd, phase, name, 2))


class TestEquivalence(unittest.TestCase):
    def test_matches_centralized_iterates(self):
        game, graph = small_cournot(seed=5)
        stop = StopRule(fp_tol=None, max_iters=100)
        for kind in ALL_KINDS:
            with self.subTest(kind=kind):
                _, steps = prepare(game, graph, kind)
                central, distributed = [], []
                solve(game, graph, kind, stop, steps=steps, callback=collect(central))
                run_distributed(game, graph, kind, stop, steps=steps, callback=collect(distributed))
                self.assertEqual(len(central), 100)
                np.testing.assert_allclose(np.array(distributed), np.array(central), rtol=0, atol=1e-12)

    def test_single_agent(self):
        game = trivial_game()
        stop = StopRule(fp_tol=None, max_iters=30)
        for kind in ALL_KINDS:
            with self.subTest(kind=kind):
                central, distributed = [], []
                solve(game, single_node(), kind, stop, callback=collect(central))
                _, _, stats = run_distributed(game, single_node(), kind, stop, callback=collect(distributed))
                self.assertEqual(stats.total_messages, 0)
                self.assertEqual(stats.rounds, 60)
                np.testing.assert_allclose(np.array(distributed), np.array(central), rtol=0, atol=1e-12)

    def test_execution_order_and_threads_do_not_matter(self):
        game, graph = small_cournot(seed=6)
        stop = StopRule(fp_tol=None, max_iters=40)
        for kind in ALL_KINDS:
            with self.subTest(kind=kind):
                u_ref, trace_ref, _ = run_distributed(game, graph, kind, stop)
                order = list(reversed(range(game.n_agents)))
                u_rev, _, _ = run_distributed(game, graph, kind, stop, order=order)
                u_pool, _, _ = run_distributed(game, graph, kind, stop, workers=4)
                np.testing.assert_array_equal(u_rev.stack(), u_ref.stack())
                np.testing.assert_array_equal(u_pool.stack(), u_ref.stack())

    def test_deterministic(self):
        game, graph = small_cournot(seed=7)
        stop = StopRule(fp_tol=None, max_iters=20)
        u1, t1, s1 = run_distributed(game, graph, "fbf", stop)
        u2, t2, s2 = run_distributed(game, graph, "fbf", stop)
        np.testing.assert_array_equal(u1.stack(), u2.stack())
        np.testing.assert_array_equal(t1.column("fp_res"), t2.column("fp_res"))
        self.assertEqual(s1.rows, s2.rows)

    def test_gradient_evaluations(self):
        game, graph = small_cournot()
        stop = StopRule(fp_tol=None, max_iters=12)
        for kind, per_iteration in (("fb", 1), ("fbf", 2), ("fbhf", 1)):
            with self.subTest(kind=kind):
                _, trace, _ = run_distributed(game, graph, kind, stop)
                self.assertEqual(trace.last()["grad_evals"], per_iteration * 12)


class TestMessages(unittest.TestCase):
    def setUp(self):
        self.game, self.graph = small_cournot(seed=8)
        self.interference = sum(len(a.interference_neighbors) for a in self.game.agents)
        self.dual = sum(len(nbrs) for nbrs in self.graph.neighbor_lists)

    def counts(self, kind):
        _, _, stats = run_distributed(self.game, self.graph, kind, StopRule(fp_tol=None, max_iters=3))
        return stats

    def test_fbf_counts(self):
        stats = self.counts("fbf")
        per_phase = self.interference + 2 * self.dual
        for k in (1, 2, 3):
            self.assertEqual(stats.per_phase(k), [per_phase, per_phase])
        self.assertEqual(stats.rounds, 6)

    def test_fbhf_counts(self):
        stats = self.counts("fbhf")
        self.assertEqual(stats.per_phase(2), [self.interference + 2 * self.dual, 2 * self.dual])

    def test_fb_counts(self):
        stats = self.counts("fb")
        self.assertEqual(stats.per_phase(1), [self.interference + self.dual, self.dual])

    def test_scalar_volume(self):
        stats = self.counts("fbf")
        frame = stats.to_frame()
        self.assertEqual(list(frame.columns), ["iter", "phase", "messages", "scalars_sent"])
        self.assertEqual(stats.total_scalars, int(frame["scalars_sent"].sum()))
        self.assertGreaterEqual(stats.total_scalars, stats.total_messages)

    def test_two_phases_everywhere(self):
        for kind in ALL_KINDS:
            self.assertEqual(len(RoundSchedule.for_kind(kind).phases), 2)

    def test_stats_csv(self):
        test_dir = Path(tempfile.mkdtemp())
        try:
            path = self.counts("fb").to_csv(test_dir / "messages.csv")
            self.assertEqual(len(pd.read_csv(path)), 6)
        finally:
            shutil.rmtree(test_dir)


class TestLocalityAudit(unittest.TestCase):
    def test_standard_instances_pass(self):
        game, graph = small_cournot()
        for kind in ALL_KINDS:
            with self.subTest(kind=kind):
                report = locality_audit(game, graph, kind)
                self.assertTrue(report.passed)
                for i in range(game.n_agents):
                    self.assertEqual(set(report.received_from(i, "lam")), set(graph.neighbor_lists[i]))

    def test_audit_on_admissible_instance_is_quiet(self):
        game, graph = small_cournot()
        with patch("gne.solvers.logger") as logger:
            for kind in ALL_KINDS:
                locality_audit(game, graph, kind)
        logger.warning.assert_not_called()

    def test_cournot_interference_is_same_market(self):
        game, graph = small_cournot(seed=9)
        data = game.metadata["cournot"]
        report = locality_audit(game, graph, "fbf")
        for i in range(game.n_agents):
            same_market = {
                j for j in range(game.n_agents)
                if j != i and np.any(data.participation[i] & data.participation[j])
            }
            self.assertEqual(set(report.received_from(i, "x")), same_market)

    def test_mis_wired_agent_fails(self):
        game, graph = small_cournot()
        steps = StepConfig.uniform(1e-3, game.n_agents)
        u0 = default_initial_iterate(game)
        agents = build_agents(game, graph, steps, u0)
        # agent 0 on the 4-cycle is not wired to agent 2
        agents[0] = MisWiredAgent(**{f: getattr(agents[0], f) for f in agents[0].__dataclass_fields__})
        with self.assertRaises(AuditFailure) as ctx:
            locality_audit(game, graph, "fbf", agents=agents)
        self.assertEqual(ctx.exception.agent, 0)

    def test_unwired_dual_weight_fails(self):
        game = scalar_game(1.0, 0.0)
        steps = StepConfig.uniform(1e-3, 1)
        agents = build_agents(game, single_node(), steps, Iterate(np.zeros(1), np.zeros(1), np.zeros(1)))
        agents[0].dual_weights[1] = 1.0
        with self.assertRaises(AuditFailure):
            run_distributed(game, single_node(), "fb", StopRule(fp_tol=None, max_iters=1),
                            steps=steps, agents=agents)


if __name__ == "__main__":
    unittest.main()
