"""
Check Application.
Reports which standing assumptions an instance satisfies and which solvers it admits.
"""

from dataclasses import asdict

import numpy as np

from config import Config
from gne.errors import AssumptionViolationError, GneError
from gne.instance_io import game_from_document, graph_from_document, instance_hash, read_document
from gne.model import (
    check_gradient_fd,
    sample_lipschitz,
    sample_monotonicity,
    sample_strong_monotonicity,
    slater_margin,
)
from gne.solvers import fbhf_step_bound, select_steps_fb
from gne.splitting import compute_constants
from utils.log_utils import get_logger

logger = get_logger("gne.apps.check")


def _certificate(cert):
    data = asdict(cert)
    data["passed"] = bool(cert.passed)
    return data


class CheckApp:
    def __init__(self, instance_path):
        self.instance_path = instance_path
        sampling = Config.get_sampling_defaults()
        self.pairs = int(sampling["pairs"])
        self.seed = int(sampling["seed"])

    def graph_report(self, doc):
        try:
            graph = graph_from_document(doc)
        except AssumptionViolationError as e:
            logger.warning(f"Graph assumption failed: {e}")
            return None, {"connected": False, "components": e.components, "message": str(e)}
        return graph, {
            "connected": True,
            "n_agents": graph.n_agents,
            "max_degree": graph.max_degree,
            "kappa": graph.op_norm,
        }

    def operator_report(self, game):
        beta = game.constants.beta
        report = {
            "monotone": _certificate(sample_monotonicity(game, self.pairs, self.seed)),
            "declared": {"beta": beta, "eta": game.constants.eta, "source": game.constants.source,
                         "monotone": game.monotone},
        }
        if beta is not None and np.isfinite(beta):
            report["lipschitz"] = _certificate(sample_lipschitz(game, beta, self.pairs, self.seed))
        if game.constants.eta > 0:
            report["strongly_monotone"] = _certificate(
                sample_strong_monotonicity(game, game.constants.eta, self.pairs, self.seed)
            )
        else:
            report["strongly_monotone"] = {"name": "strongly_monotone", "passed": False,
                                           "worst": 0.0, "pairs": 0, "label": "declared η = 0"}
        if any(agent.f_value is not None for agent in game.agents):
            report["gradient_fd"] = _certificate(check_gradient_fd(game, points=20, seed=self.seed))
        margin = slater_margin(game)
        report["slater"] = {
            "margin": margin,
            "holds": bool(game.slater) if margin is None else bool(margin > 0),
            "label": "trusted flag" if margin is None else "lp",
        }
        return report

    def solver_report(self, game, graph):
        constants = compute_constants(game, graph, pairs=self.pairs, seed=self.seed)
        if not game.monotone:
            reason = "pseudo-gradient is not monotone"
            return asdict(constants), {kind: {"admissible": False, "reason": reason}
                                       for kind in ("fbf", "fbhf", "fb")}
        solvers = {"fbf": {"admissible": True, "step_bound": 1.0 / constants.L_D}}
        try:
            solvers["fbhf"] = {"admissible": True, "step_bound": fbhf_step_bound(constants)}
        except GneError as e:
            solvers["fbhf"] = {"admissible": False, "reason": str(e)}
        try:
            steps = select_steps_fb(game, graph, constants)
            solvers["fb"] = {"admissible": True, "steps": steps.as_dict()}
        except GneError as e:
            solvers["fb"] = {"admissible": False, "reason": str(e)}
        return asdict(constants), solvers

    def run(self):
        """
        Returns:
            dict: The assumption report

        Raises:
            ValidationError: If the instance cannot be loaded
        """
        doc = read_document(self.instance_path)
        game = game_from_document(doc)
        graph, graph_section = self.graph_report(doc)
        report = {
            "instance": str(self.instance_path),
            "instance_hash": instance_hash(doc),
            "kind": game.kind,
            "graph": graph_section,
            "operator": self.operator_report(game),
        }
        if graph is not None:
            report["constants"], report["solvers"] = self.solver_report(game, graph)
        report["passed"] = bool(
            graph_section["connected"]
            and game.monotone
            and report["operator"]["monotone"]["passed"]
            and report["operator"]["slater"]["holds"]
        )
        logger.info(f"Check of {self.instance_path}: {'pass' if report['passed'] else 'assumption failures'}")
        return report


def cmd_check(instance_path):
    return CheckApp(instance_path).run()
