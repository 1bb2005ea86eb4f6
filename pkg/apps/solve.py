"""
Solve Application.
Runs every requested (solver, seed) pair on an instance and writes traces and summaries.
"""

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from config import Config
from gne.cournot import CournotParams, generate
from gne.errors import (
    AssumptionViolationError,
    DivergenceError,
    SolverPrerequisiteError,
    StepSizeRejectedError,
    ValidationError,
)
from gne.instance_io import instance_document, instance_hash, load_instance
from gne.model import sample_points
from gne.solvers import STATUS_MAX_ITERS, SolverKind, StopRule, default_initial_iterate, prepare, solve
from gne.splitting import Iterate
from utils.build_info import build_info
from utils.io_utils import atomic_write_json
from utils.log_utils import get_logger

logger = get_logger("gne.apps.solve")

STATUS_PREREQUISITE = "prerequisite_error"
STATUS_DIVERGED = "diverged"


@dataclass
class RunResult:
    solver: str
    seed: int
    status: str
    iterations: int = 0
    final: dict = field(default_factory=dict)
    cpu_s: float = 0.0
    wall_s: float = 0.0
    steps: dict = None
    error: str = None
    trace_path: str = None
    trace: object = None

    def summary(self):
        data = asdict(self)
        data.pop("trace")
        return data


class SolveApp:
    def __init__(self, config):
        self.config = config.with_defaults().validate()
        self.output_dir = Path(self.config.output_dir)
        self.results = []
        self._instances = {}
        self._references = {}

    def log_message(self, message, level="info"):
        getattr(logger, level)(message)

    # Instances

    def instance_for(self, seed):
        """(game, graph, hash) for a seed; instance files ignore the seed."""
        key = None if self.config.instance_file else seed
        if key not in self._instances:
            if self.config.instance_file:
                self._instances[key] = load_instance(self.config.instance_file)
            else:
                params = dict(self.config.cournot or {})
                params["seed"] = seed
                game, graph = generate(CournotParams.from_dict(params))
                self._instances[key] = (game, graph, instance_hash(instance_document(game, graph)))
        return self._instances[key]

    def initial_iterate(self, game, seed):
        """Generated instances start from the default point; instance files draw x⁰ from the seed."""
        u0 = default_initial_iterate(game)
        if self.config.instance_file and len(self.config.seeds) > 1:
            rng = np.random.default_rng(seed)
            u0 = Iterate(sample_points(game, 1, rng)[0], u0.z, u0.lam)
        return u0

    # Reference x*

    def reference_path(self, digest):
        return self.output_dir / f"reference_{digest}.npz"

    def reference_for(self, game, graph, digest):
        """
        x* under the configured policy.

        Raises:
            ValidationError: Policy "load" and no cached reference for this instance
        """
        policy = self.config.reference
        if policy == "none":
            return None
        if digest in self._references:
            return self._references[digest]
        path = self.reference_path(digest)
        if path.exists():
            with np.load(path) as cached:
                x_star = cached["x"].copy()
            self.log_message(f"Loaded reference {path.name}")
        elif policy == "load":
            raise ValidationError(f"No cached reference for instance {digest[:12]} in {self.output_dir}")
        else:
            x_star = self.compute_reference(game, graph, path)
        self._references[digest] = x_star
        return x_star

    def compute_reference(self, game, graph, path):
        ref = Config.get_reference_defaults()
        stop = StopRule(fp_tol=ref["fp_tol"], max_iters=ref["max_iters"])
        self.log_message(f"Computing FBF reference to fp_tol {ref['fp_tol']:g}")
        u, trace, status = solve(game, graph, SolverKind.FBF, stop)
        if status == STATUS_MAX_ITERS:
            self.log_message(
                f"Reference stopped at the iteration cap (fp_res {trace.last()['fp_res']:.3e})", "warning"
            )
        self.output_dir.mkdir(parents=True, exist_ok=True)
        np.savez(path, x=u.x, z=u.z, lam=u.lam, iterations=len(trace))
        return u.x

    # Runs

    def stop_rule(self):
        return StopRule(fp_tol=self.config.fp_tol, kkt_tol=self.config.kkt_tol,
                        max_iters=self.config.max_iters)

    def run_one(self, solver, seed):
        game, graph, digest = self.instance_for(seed)
        kind = SolverKind.parse(solver)
        solver_defaults = Config.get_solver_defaults()
        result = RunResult(solver=kind.value, seed=seed, status="")
        try:
            constants, steps = prepare(game, graph, kind, margin=solver_defaults["fb_margin"],
                                       safety=solver_defaults["safety"])
            reference = self.reference_for(game, graph, digest)
            wall = time.perf_counter()
            u, trace, status = solve(game, graph, kind, self.stop_rule(),
                                     u0=self.initial_iterate(game, seed), reference=reference,
                                     steps=steps, constants=constants)
            result.wall_s = time.perf_counter() - wall
            result.status = status
            result.iterations = len(trace)
            result.final = {k: (None if isinstance(v, float) and np.isnan(v) else v)
                            for k, v in trace.last().items()}
            result.cpu_s = float(trace.last().get("cpu_s", 0.0))
            result.steps = steps.as_dict()
            result.trace = trace
            trace_path = self.output_dir / f"trace_{kind.value}_seed{seed}.csv"
            trace.to_csv(trace_path)
            result.trace_path = str(trace_path)
            constants_dict = asdict(constants)
        except (SolverPrerequisiteError, StepSizeRejectedError, AssumptionViolationError) as e:
            self.log_message(f"{kind.name} seed {seed}: {e}", "error")
            result.status = STATUS_PREREQUISITE
            result.error = str(e)
            constants_dict = None
        except DivergenceError as e:
            self.log_message(f"{kind.name} seed {seed}: {e}", "error")
            result.status = STATUS_DIVERGED
            result.error = str(e)
            result.iterations = e.iteration
            constants_dict = None

        summary = result.summary()
        summary.update({
            "instance_hash": digest,
            "constants": constants_dict,
            "stop": asdict(self.stop_rule()),
            "reference_policy": self.config.reference,
            "seeds": list(self.config.seeds),
            "build": build_info(),
        })
        atomic_write_json(self.output_dir / f"summary_{kind.value}_seed{seed}.json", summary)
        self.results.append(result)
        return result

    def run(self):
        self.output_dir.mkdir(parents=True, exist_ok=True)
        for seed in self.config.seeds:
            for solver in self.config.solvers:
                result = self.run_one(solver, seed)
                self.log_message(
                    f"{result.solver} seed {seed}: {result.status} "
                    f"({result.iterations} iterations, {result.cpu_s:.2f}s CPU)"
                )
        atomic_write_json(self.output_dir / "solve_summary.json",
                          {"runs": [r.summary() for r in self.results], "build": build_info()})
        return self.results


def exit_code(results):
    """0 when every run finished, 3 if any diverged, else 2 if any hit a prerequisite error."""
    statuses = {r.status for r in results}
    if STATUS_DIVERGED in statuses:
        return 3
    if STATUS_PREREQUISITE in statuses:
        return 2
    return 0


def cmd_solve(config):
    return SolveApp(config).run()
