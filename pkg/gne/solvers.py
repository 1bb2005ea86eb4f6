"""
Fixed-point engines for the v-GNE: preconditioned forward-backward (FB),
forward-backward-forward (FBF) and forward-backward-half-forward (FBHF).

Every update is derived from the compact operator form

    FB:    u⁺ = J_{Φ⁻¹(𝓑+𝓒)}(u − Φ⁻¹𝓐u)
    FBF:   ũ = J_{Ψ⁻¹𝓒}(v − Ψ⁻¹𝓓v),        v⁺ = ũ + Ψ⁻¹(𝓓v − 𝓓ũ)
    FBHF:  ũ = J_{Ψ⁻¹𝓒}(v − Ψ⁻¹(𝓐+𝓑)v),   v⁺ = ũ + Ψ⁻¹(𝓑v − 𝓑ũ)
"""

import itertools
import time
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
import pandas as pd

from gne.errors import (
    ConfigurationError,
    DivergenceError,
    SolverPrerequisiteError,
    StepSizeRejectedError,
)
from gne.model import apply_prox_block, kkt_residual
from gne.splitting import Iterate, Splitting, StepConfig, build_phi_fb, compute_constants
from utils.io_utils import atomic_write_frame
from utils.log_utils import get_logger

logger = get_logger(__name__)

STATUS_CONVERGED_FP = "converged_fp"
STATUS_CONVERGED_KKT = "converged_kkt"
STATUS_MAX_ITERS = "max_iters"

TRACE_COLUMNS = (
    "iter", "fp_res", "kkt_stat", "kkt_feas", "kkt_comp", "kkt_cons",
    "rel_dist", "cpu_s", "comm_rounds", "grad_evals",
)

ROUNDS_PER_ITERATION = 2
DEFAULT_FB_MARGIN = 1e-2
DEFAULT_SAFETY = 0.99


class SolverKind(Enum):
    FB = "fb"
    FBF = "fbf"
    FBHF = "fbhf"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigurationError(f"Unknown solver '{value}' (expected one of fb, fbf, fbhf)")

    @property
    def grad_evals_per_iteration(self):
        return 2 if self is SolverKind.FBF else 1

    @property
    def requires_strong_monotonicity(self):
        return self is not SolverKind.FBF


@dataclass(frozen=True)
class StopRule:
    """
    Stopping criteria. A run converges once every active tolerance is met;
    `max_iters` caps the run regardless.
    """
    fp_tol: Optional[float] = 1e-8
    kkt_tol: Optional[float] = None
    max_iters: Optional[int] = None

    def __post_init__(self):
        if self.fp_tol is None and self.kkt_tol is None and self.max_iters is None:
            raise ConfigurationError("At least one stopping criterion must be active.")
        for name in ("fp_tol", "kkt_tol"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ConfigurationError(f"{name} must be positive, got {value}")
        if self.max_iters is not None and self.max_iters < 1:
            raise ConfigurationError(f"max_iters must be at least 1, got {self.max_iters}")

    def status(self, fp_res, kkt_max):
        """Convergence status reached by these residuals, or None."""
        if self.fp_tol is None and self.kkt_tol is None:
            return None
        if self.fp_tol is not None and not fp_res <= self.fp_tol:
            return None
        if self.kkt_tol is not None and not kkt_max <= self.kkt_tol:
            return None
        return STATUS_CONVERGED_KKT if self.kkt_tol is not None else STATUS_CONVERGED_FP

    def iterations(self):
        if self.max_iters is None:
            return itertools.count(1)
        return range(1, self.max_iters + 1)


class RunTrace:
    """Per-iteration records of one run, stored column-wise."""

    def __init__(self):
        self._columns = {name: [] for name in TRACE_COLUMNS}

    def record(self, iteration, fp_res, kkt, rel_dist, cpu_s, comm_rounds, grad_evals):
        row = {
            "iter": iteration,
            "fp_res": fp_res,
            "kkt_stat": kkt.stationarity,
            "kkt_feas": kkt.primal_feasibility,
            "kkt_comp": kkt.complementarity,
            "kkt_cons": kkt.dual_consensus,
            "rel_dist": np.nan if rel_dist is None else rel_dist,
            "cpu_s": cpu_s,
            "comm_rounds": comm_rounds,
            "grad_evals": grad_evals,
        }
        for name, value in row.items():
            self._columns[name].append(value)

    def __len__(self):
        return len(self._columns["iter"])

    def column(self, name):
        return np.asarray(self._columns[name])

    def last(self):
        if not len(self):
            return {}
        return {name: values[-1] for name, values in self._columns.items()}

    def to_frame(self):
        frame = pd.DataFrame(self._columns, columns=list(TRACE_COLUMNS))
        return frame.astype({"iter": "int64", "comm_rounds": "int64", "grad_evals": "int64"})

    def to_csv(self, path):
        return atomic_write_frame(path, self.to_frame())


def _check_safety(safety):
    if not 0 < safety < 1:
        raise ConfigurationError(f"Safety factor must lie in (0, 1), got {safety}")


def select_steps_fbf(constants, n_agents, safety=DEFAULT_SAFETY):
    """Uniform steps safety / L_D, so |Ψ⁻¹|·L_D < 1."""
    _check_safety(safety)
    return StepConfig.uniform(safety / constants.L_D, n_agents)


def fbhf_step_bound(constants):
    """min{2θ, 1/L_B}, with 1/L_B read as +inf when L_B = 0."""
    if constants.theta is None:
        raise SolverPrerequisiteError("FBHF requires a strongly monotone pseudo-gradient (η > 0).")
    inv_lb = np.inf if constants.L_B == 0 else 1.0 / constants.L_B
    return float(min(2.0 * constants.theta, inv_lb))


def select_steps_fbhf(constants, n_agents, safety=DEFAULT_SAFETY):
    _check_safety(safety)
    return StepConfig.uniform(safety * fbhf_step_bound(constants), n_agents)


def select_steps_fb(game, graph, constants, margin=DEFAULT_FB_MARGIN):
    """
    Gershgorin steps for the preconditioned forward-backward method.

    Inverse steps dominate their Φ_FB rows strictly:
        ρ_i⁻¹ = max column-sum of |A_i| + margin
        σ_i⁻¹ = 2 deg_i + margin
        τ_i⁻¹ = max row-sum of |A_i| + 2 deg_i + margin
    When α = λ_min(Φ_FB) fails αθ > 1/2, all three inverse diagonals are shifted by
    (1/2 + margin)/θ − α, which lifts λ_min(Φ_FB) to at least (1/2 + margin)/θ.

    Args:
        game (GameInstance): The game
        graph (CommGraph): Dual communication graph
        constants (ConstantsBundle): Output of compute_constants
        margin (float): Strict dominance margin

    Returns:
        StepConfig

    Raises:
        SolverPrerequisiteError: If η = 0
        StepSizeRejectedError: If Φ_FB still fails to be positive definite
    """
    if not constants.strongly_monotone:
        raise SolverPrerequisiteError("FB requires a strongly monotone pseudo-gradient (η > 0).")
    if not margin > 0:
        raise ConfigurationError(f"FB margin must be positive, got {margin}")

    degrees = graph.degrees
    blocks = [np.abs(agent.coupling_block) for agent in game.agents]
    rho_inv = np.array([blk.sum(axis=0).max() for blk in blocks]) + margin
    sigma_inv = 2.0 * degrees + margin
    tau_inv = np.array([blk.sum(axis=1).max() for blk in blocks]) + 2.0 * degrees + margin

    steps = StepConfig(1.0 / rho_inv, 1.0 / sigma_inv, 1.0 / tau_inv)
    alpha = build_phi_fb(steps, game, graph).min_eigenvalue
    if alpha * constants.theta <= 0.5:
        shift = (0.5 + margin) / constants.theta - alpha
        logger.debug(f"FB steps: λ_min(Φ)={alpha:.6g}, θ={constants.theta:.6g}; shifting by {shift:.6g}")
        steps = StepConfig(1.0 / (rho_inv + shift), 1.0 / (sigma_inv + shift), 1.0 / (tau_inv + shift))
        alpha = build_phi_fb(steps, game, graph).min_eigenvalue
    if not alpha * constants.theta > 0.5:
        raise StepSizeRejectedError(alpha)
    return steps


def select_steps(kind, game, graph, constants, margin=DEFAULT_FB_MARGIN, safety=DEFAULT_SAFETY):
    kind = SolverKind.parse(kind)
    if kind is SolverKind.FB:
        return select_steps_fb(game, graph, constants, margin)
    if kind is SolverKind.FBF:
        return select_steps_fbf(constants, game.n_agents, safety)
    return select_steps_fbhf(constants, game.n_agents, safety)


def check_steps(kind, steps, game, graph, constants):
    """
    Verify user-supplied steps against the bound required by `kind`.

    Raises:
        SolverPrerequisiteError: FB/FBHF on a merely monotone game
        StepSizeRejectedError: FB steps with Φ_FB not positive definite
        ConfigurationError: FBF/FBHF steps above their bound
    """
    kind = SolverKind.parse(kind)
    if kind.requires_strong_monotonicity and not constants.strongly_monotone:
        raise SolverPrerequisiteError(
            f"{kind.name} requires a strongly monotone pseudo-gradient (η > 0)."
        )
    if kind is SolverKind.FB:
        build_phi_fb(steps, game, graph)
    elif kind is SolverKind.FBF:
        if not steps.psi_inv_norm * constants.L_D < 1:
            raise ConfigurationError(
                f"FBF steps violate |Ψ⁻¹|·L_D < 1 ({steps.psi_inv_norm * constants.L_D:.6g})"
            )
    elif steps.psi_inv_norm > fbhf_step_bound(constants):
        raise ConfigurationError(
            f"FBHF steps violate |Ψ⁻¹| <= min{{2θ, 1/L_B}} ({steps.psi_inv_norm:.6g})"
        )


def step_fb(splitting, u, steps):
    """
    One preconditioned forward-backward step.

    x⁺ = prox_ρ(x − ρ(F(x) + 𝐀ᵀλ))
    z⁺ = z − σ L̄λ
    λ⁺ = max(0, λ + τ(𝐀(2x⁺ − x) − b̄ + L̄(2z⁺ − z) − L̄λ))
    """
    rx, sz, tl = steps.expanded(splitting.game.dims, splitting.m)
    A = splitting.A_stacked
    L_lam = splitting.L_bar(u.lam)
    x_new = apply_prox_block(
        splitting.game, u.x - rx * (splitting.F(u.x) + A.T @ u.lam), steps.rho
    )
    z_new = u.z - sz * L_lam
    lam_new = np.maximum(
        u.lam + tl * (A @ (2.0 * x_new - u.x) - splitting.b_bar
                      + splitting.L_bar(2.0 * z_new - u.z) - L_lam),
        0.0,
    )
    return Iterate(x_new, z_new, lam_new)


def step_fbf(splitting, v, steps):
    """One forward-backward-forward step; returns (v⁺, ũ)."""
    Dv = splitting.op_D(v)
    u = splitting.resolvent_C(v - splitting.apply_step(steps, Dv), steps)
    Du = splitting.op_D(u)
    return u + splitting.apply_step(steps, Dv - Du), u


def step_fbhf(splitting, v, steps):
    """One forward-backward-half-forward step; only 𝓑 is evaluated twice. Returns (v⁺, ũ)."""
    Av = splitting.op_A(v)
    Bv = splitting.op_B(v)
    u = splitting.resolvent_C(v - splitting.apply_step(steps, Av + Bv), steps)
    Bu = splitting.op_B(u)
    return u + splitting.apply_step(steps, Bv - Bu), u


def advance(kind, splitting, v, steps):
    """Apply the map of `kind` once; returns (next iterate, feasible half-iterate)."""
    if kind is SolverKind.FB:
        u = step_fb(splitting, v, steps)
        return u, u
    if kind is SolverKind.FBF:
        return step_fbf(splitting, v, steps)
    return step_fbhf(splitting, v, steps)


def fixed_point_residual(game, graph, kind, u, steps):
    """‖T(u) − u‖ for the map of `kind`, evaluated on a fresh splitting."""
    splitting = Splitting(game, graph)
    v_next, _ = advance(SolverKind.parse(kind), splitting, u, steps)
    return (v_next - u).norm()


def default_initial_iterate(game):
    """x⁰ at box midpoints (clamped 0 on half-bounded or free coordinates); z⁰ = λ⁰ = 0."""
    lo, hi = game.lower, game.upper
    both = np.isfinite(lo) & np.isfinite(hi)
    x0 = np.clip(np.zeros(game.n), lo, hi)
    x0[both] = 0.5 * (lo[both] + hi[both])
    mN = game.m * game.n_agents
    return Iterate(x0, np.zeros(mN), np.zeros(mN))


def relative_distance(x, reference):
    if reference is None:
        return None
    scale = np.linalg.norm(reference)
    diff = np.linalg.norm(x - reference)
    return float(diff / scale) if scale > 0 else float(diff)


def prepare(game, graph, kind, steps=None, constants=None, margin=DEFAULT_FB_MARGIN,
            safety=DEFAULT_SAFETY, force=False):
    """
    Constants and validated steps for a run.

    Args:
        steps (StepConfig | None): Explicit steps; selected by the rule of `kind` when omitted
        force (bool): Run explicit steps even when a prerequisite or step-bound check fails;
            the failed check is logged as a warning. Only meant for demonstrating divergence
            on games outside the theory.

    Returns:
        tuple[ConstantsBundle, StepConfig]

    Raises:
        SolverPrerequisiteError: On a game whose pseudo-gradient is not monotone
    """
    kind = SolverKind.parse(kind)
    if constants is None:
        constants = compute_constants(game, graph)
    try:
        if not game.monotone:
            raise SolverPrerequisiteError(f"{kind.name} requires a monotone pseudo-gradient; this game is not.")
        if steps is None:
            steps = select_steps(kind, game, graph, constants, margin=margin, safety=safety)
        else:
            check_steps(kind, steps, game, graph, constants)
    except (SolverPrerequisiteError, StepSizeRejectedError, ConfigurationError) as e:
        if not force or steps is None:
            raise
        logger.warning(f"{kind.name} run forced past a failed check: {e}")
    return constants, steps


def solve(game, graph, kind, stop, u0=None, reference=None, steps=None, constants=None,
          margin=DEFAULT_FB_MARGIN, safety=DEFAULT_SAFETY, force=False, callback=None,
          log_every=1000):
    """
    Run one solver until a stop criterion fires.

    The fixed-point residual is measured on the main sequence, ‖u^{k+1} − u^k‖ / max(1, ‖u^k‖);
    KKT residuals are measured on the projected half-iterate, whose duals are nonnegative.

    Args:
        game (GameInstance): The game
        graph (CommGraph): Dual communication graph
        kind (SolverKind | str): fb, fbf or fbhf
        stop (StopRule): Stopping criteria
        u0 (Iterate | None): Initial iterate; default_initial_iterate when omitted
        reference (np.ndarray | None): x* for the relative-distance column
        steps, constants, margin, safety, force: see `prepare`
        callback (callable | None): Called as callback(k, u_next, u_half) after each iteration
        log_every (int): DEBUG progress interval

    Returns:
        tuple[Iterate, RunTrace, str]: Final iterate, trace and status

    Raises:
        SolverPrerequisiteError: FB/FBHF on a game with η = 0 (unless forced)
        DivergenceError: If an iterate becomes non-finite
    """
    kind = SolverKind.parse(kind)
    constants, steps = prepare(game, graph, kind, steps, constants, margin, safety, force)
    splitting = Splitting(game, graph)
    u = default_initial_iterate(game) if u0 is None else u0.copy()
    splitting._check(u)
    ref = None if reference is None else np.asarray(reference, dtype=float)

    logger.info(
        f"{kind.name}: N={game.n_agents} n={game.n} m={game.m} |Ψ⁻¹|={steps.psi_inv_norm:.6g} "
        f"(constants {constants.source})"
    )
    trace = RunTrace()
    cpu = 0.0
    status = STATUS_MAX_ITERS
    for k in stop.iterations():
        start = time.process_time()
        u_next, u_half = advance(kind, splitting, u, steps)
        cpu += time.process_time() - start
        if not (u_next.is_finite() and u_half.is_finite()):
            logger.error(f"{kind.name}: non-finite iterate at iteration {k}")
            raise DivergenceError(k, u)

        fp_res = (u_next - u).norm() / max(1.0, u.norm())
        kkt = kkt_residual(game, u_half.x, u_half.lam, graph)
        trace.record(k, fp_res, kkt, relative_distance(u_next.x, ref), cpu,
                     ROUNDS_PER_ITERATION * k, splitting.grad_evals)
        if callback is not None:
            callback(k, u_next, u_half)
        u = u_next
        if log_every and k % log_every == 0:
            logger.debug(f"{kind.name} iter {k}: fp={fp_res:.3e} kkt={kkt.max():.3e}")
        reached = stop.status(fp_res, kkt.max())
        if reached is not None:
            status = reached
            break

    logger.info(f"{kind.name}: {status} after {len(trace)} iterations ({cpu:.2f}s CPU)")
    return u, trace, status
