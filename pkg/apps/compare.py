"""
Compare Application.
Runs every (solver, seed) pair and tabulates final metrics and mean convergence paths.
"""

import pandas as pd

from apps.solve import SolveApp
from utils.io_utils import atomic_write_frame
from utils.log_utils import get_logger

logger = get_logger("gne.apps.compare")

SUMMARY_COLUMNS = (
    "solver", "seed", "status", "iterations", "fp_res", "kkt_stat", "kkt_feas",
    "kkt_comp", "kkt_cons", "rel_dist", "cpu_s", "wall_s", "grad_evals", "comm_rounds",
)


def summary_frame(results):
    rows = []
    for r in results:
        row = {"solver": r.solver, "seed": r.seed, "status": r.status,
               "iterations": r.iterations, "cpu_s": r.cpu_s, "wall_s": r.wall_s}
        for key in ("fp_res", "kkt_stat", "kkt_feas", "kkt_comp", "kkt_cons",
                    "rel_dist", "grad_evals", "comm_rounds"):
            row[key] = r.final.get(key)
        rows.append(row)
    return pd.DataFrame(rows, columns=list(SUMMARY_COLUMNS))


def mean_path(results, solver):
    """
    Per-iteration mean of rel_dist across seeds. Runs that stopped early hold their
    last value so every seed contributes to every row.
    """
    columns = {
        r.seed: pd.Series(r.trace.column("rel_dist"), index=r.trace.column("iter"))
        for r in results if r.solver == solver and r.trace is not None
    }
    if not columns:
        return None
    paths = pd.DataFrame(columns).sort_index().ffill()
    frame = pd.DataFrame({
        "iter": paths.index.astype("int64"),
        "mean_rel_dist": paths.mean(axis=1, skipna=True).to_numpy(),
        "min_rel_dist": paths.min(axis=1, skipna=True).to_numpy(),
        "max_rel_dist": paths.max(axis=1, skipna=True).to_numpy(),
        "runs": paths.notna().sum(axis=1).to_numpy(),
    })
    return frame


class CompareApp:
    def __init__(self, config):
        self.solve_app = SolveApp(config)
        self.output_dir = self.solve_app.output_dir

    def run(self):
        results = self.solve_app.run()
        table = summary_frame(results)
        atomic_write_frame(self.output_dir / "compare_summary.csv", table)
        for solver in sorted({r.solver for r in results}):
            frame = mean_path(results, solver)
            if frame is not None:
                atomic_write_frame(self.output_dir / f"mean_path_{solver}.csv", frame)

        finished = table[table["iterations"] > 0]
        if not finished.empty:
            per_iter = (finished["cpu_s"] / finished["iterations"]).groupby(finished["solver"]).mean()
            for solver, seconds in per_iter.items():
                logger.info(f"{solver}: {seconds * 1e3:.4f} ms CPU per iteration (mean over seeds)")
        return results, table


def cmd_compare(config):
    return CompareApp(config).run()
