"""
GNE Tool Suite - Command Line Entry Point

Subcommands:
    generate   write a seeded Cournot instance
    solve      run FB / FBF / FBHF on an instance, one trace CSV per (solver, seed)
    compare    solve, then tabulate final metrics and mean paths across seeds
    check      report standing assumptions and admissible steps for an instance
"""

import argparse
import json
import sys

from config import Config, ExperimentConfig, REFERENCE_POLICIES, SOLVER_NAMES
from gne.errors import (
    AssumptionViolationError,
    DivergenceError,
    GneError,
    SolverPrerequisiteError,
    StepSizeRejectedError,
    ValidationError,
)
from utils.log_utils import log_message, set_level

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_PREREQUISITE = 2
EXIT_DIVERGENCE = 3


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gne", description=f"GNE Tool Suite {Config.APP_VERSION}: distributed v-GNE solvers"
    )
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="Write a seeded Cournot instance")
    gen.add_argument("--config", help="Experiment config file (its instance.cournot section is used)")
    gen.add_argument("--seed", type=int, default=1)
    gen.add_argument("--out", help="Output .json file or directory")
    gen.add_argument("--n-firms", type=int)
    gen.add_argument("--n-markets", type=int)
    gen.add_argument("--deterministic", action="store_true", help="Use range midpoints instead of draws")

    for name, help_text in (("solve", "Run solvers on an instance"),
                            ("compare", "Run solvers over seeds and tabulate")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="Experiment config file (JSON)")
        p.add_argument("--instance", help="Instance file (instead of a generated Cournot game)")
        p.add_argument("--seed", type=int, action="append", help="Seed (repeatable)")
        p.add_argument("--out", help="Output directory")
        p.add_argument("--solver", choices=SOLVER_NAMES, action="append", help="Solver (repeatable)")
        p.add_argument("--fp-tol", type=float)
        p.add_argument("--kkt-tol", type=float)
        p.add_argument("--max-iters", type=int)
        p.add_argument("--reference", choices=REFERENCE_POLICIES)

    chk = sub.add_parser("check", help="Report assumptions for an instance")
    chk.add_argument("instance", help="Instance file")
    chk.add_argument("--out", help="Write the report to this JSON file")
    return parser


def experiment_from_args(args):
    """ExperimentConfig from --config, overridden by explicit flags."""
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.instance:
        config.instance_file = args.instance
        config.cournot = None
    elif config.instance_file is None and config.cournot is None:
        config.cournot = {}
    if args.seed:
        config.seeds = list(args.seed)
    if args.out:
        config.output_dir = args.out
    if args.solver:
        config.solvers = list(args.solver)
    if args.fp_tol is not None:
        config.fp_tol = args.fp_tol
    if args.kkt_tol is not None:
        config.kkt_tol = args.kkt_tol
    if args.max_iters is not None:
        config.max_iters = args.max_iters
    if args.reference:
        config.reference = args.reference
    return config.with_defaults().validate()


def run_generate(args):
    from apps.generate import cmd_generate

    params = {}
    if args.config:
        params.update(ExperimentConfig.from_file(args.config).cournot or {})
    params["seed"] = args.seed
    if args.n_firms is not None:
        params["n_firms"] = args.n_firms
    if args.n_markets is not None:
        params["n_markets"] = args.n_markets
    if args.deterministic:
        params["deterministic"] = True
    path, digest = cmd_generate(params, args.out or Config.get_output_dir())
    print(f"{path} {digest}")
    return EXIT_OK


def run_solve(args):
    from apps.solve import cmd_solve, exit_code

    return exit_code(cmd_solve(experiment_from_args(args)))


def run_compare(args):
    from apps.compare import cmd_compare
    from apps.solve import exit_code

    results, table = cmd_compare(experiment_from_args(args))
    print(table.to_string(index=False))
    return exit_code(results)


def run_check(args):
    from apps.check import cmd_check
    from utils.io_utils import atomic_write_json

    report = cmd_check(args.instance)
    if args.out:
        atomic_write_json(args.out, report)
    print(json.dumps(report, indent=2, default=str))
    return EXIT_OK


COMMANDS = {
    "generate": run_generate,
    "solve": run_solve,
    "compare": run_compare,
    "check": run_check,
}


def main(argv=None):
    """Main entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    if args.log_level:
        set_level(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except ValidationError as e:
        log_message(f"ERROR: {e}", "error")
        return EXIT_VALIDATION
    except (SolverPrerequisiteError, StepSizeRejectedError, AssumptionViolationError) as e:
        log_message(f"ERROR: {e}", "error")
        return EXIT_PREREQUISITE
    except DivergenceError as e:
        log_message(f"ERROR: {e}", "error")
        return EXIT_DIVERGENCE
    except GneError as e:
        log_message(f"ERROR: {e}", "error")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
