"""
N-agent game with affine coupling constraints and the oracles every solver consumes:
pseudo-gradient, block prox, feasibility and KKT residuals.
"""

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy import linalg
from scipy.optimize import linprog

from gne.errors import AuditFailure, ConfigurationError, ContractViolationError, ValidationError
from gne.graph import laplacian_apply
from utils.log_utils import get_logger

logger = get_logger(__name__)

MONOTONE_SLACK = 1e-10
LIPSCHITZ_SLACK = 1e-10
STRONG_MONOTONE_SLACK = 1e-8


def identity_prox(v, rho):
    """Prox of g ≡ 0."""
    return np.array(v, dtype=float)


def box_prox(lower, upper):
    """Prox of the indicator of [lower, upper]: a componentwise clamp, independent of rho."""
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)

    def prox(v, rho):
        return np.clip(v, lo, hi)
    return prox


@dataclass(frozen=True)
class AgentSpec:
    """
    Local data of one agent: its gradient and prox oracles and its coupling block.

    `grad_f` takes the full strategy vector and returns this agent's block of the
    pseudo-gradient. `lower`/`upper` are set when g_i is the indicator of a box;
    `f_value` (full x -> scalar) is optional and only used for finite-difference checks.
    """
    dim: int
    grad_f: Callable
    prox_g: Callable
    coupling_block: np.ndarray
    coupling_offset: np.ndarray
    interference_neighbors: frozenset = frozenset()
    f_value: Optional[Callable] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    @property
    def has_box(self):
        return self.lower is not None and self.upper is not None


@dataclass(frozen=True)
class DeclaredConstants:
    """β and η where known. `source` is "analytic", "declared" or "empirical"."""
    beta: Optional[float] = None
    eta: float = 0.0
    source: str = "declared"


@dataclass(frozen=True)
class GameInstance:
    """
    Ordered agents sharing m coupling constraints A x <= b with A = [A_1 ... A_N], b = Σ b_i.

    `affine` holds (M, q) when F(x) = M x + q; `batch_gradient` is a vectorised F used
    in place of the per-agent loop when present.
    """
    agents: tuple
    m: int
    constants: DeclaredConstants = DeclaredConstants()
    monotone: bool = True
    slater: bool = True
    kind: str = "custom"
    affine: Optional[tuple] = None
    batch_gradient: Optional[Callable] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.m < 1:
            raise ValidationError(f"Number of coupling constraints must be positive, got {self.m}")
        if not self.agents:
            raise ValidationError("A game needs at least one agent.")
        for i, agent in enumerate(self.agents):
            if agent.dim < 1:
                raise ValidationError(f"Agent {i} has non-positive dimension {agent.dim}")
            if np.shape(agent.coupling_block) != (self.m, agent.dim):
                raise ValidationError(
                    f"Agent {i} coupling block has shape {np.shape(agent.coupling_block)}, "
                    f"expected {(self.m, agent.dim)}"
                )
            if np.shape(agent.coupling_offset) != (self.m,):
                raise ValidationError(f"Agent {i} coupling offset must have {self.m} entries")

    @property
    def n_agents(self):
        return len(self.agents)

    @property
    def dims(self):
        return [a.dim for a in self.agents]

    @property
    def n(self):
        return int(sum(self.dims))

    @cached_property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.dims)]).astype(int)

    def block(self, i):
        off = self.offsets
        return slice(int(off[i]), int(off[i + 1]))

    def split(self, x):
        return [x[self.block(i)] for i in range(self.n_agents)]

    @cached_property
    def coupling_row(self):
        """A = [A_1, ..., A_N], shape m x n."""
        return np.hstack([a.coupling_block for a in self.agents])

    @cached_property
    def stacked_coupling(self):
        """𝐀 = diag(A_1, ..., A_N), shape mN x n."""
        return linalg.block_diag(*[a.coupling_block for a in self.agents])

    @cached_property
    def b_total(self):
        return np.sum([a.coupling_offset for a in self.agents], axis=0)

    @cached_property
    def b_stacked(self):
        """b̄ = col(b_1, ..., b_N)."""
        return np.concatenate([a.coupling_offset for a in self.agents])

    @property
    def has_boxes(self):
        return all(a.has_box for a in self.agents)

    @cached_property
    def lower(self):
        return np.concatenate([
            a.lower if a.lower is not None else np.full(a.dim, -np.inf) for a in self.agents
        ])

    @cached_property
    def upper(self):
        return np.concatenate([
            a.upper if a.upper is not None else np.full(a.dim, np.inf) for a in self.agents
        ])

    def with_constants(self, beta=None, eta=None, source="declared"):
        return replace(self, constants=DeclaredConstants(beta=beta, eta=eta or 0.0, source=source))


@dataclass(frozen=True)
class KktResidual:
    """Residuals of the v-GNE conditions; all vanish together at a solution."""
    stationarity: float
    primal_feasibility: float
    complementarity: float
    dual_consensus: float
    dual_clipped: bool = False

    def max(self):
        return max(self.stationarity, self.primal_feasibility,
                   self.complementarity, self.dual_consensus)


@dataclass(frozen=True)
class Certificate:
    """Outcome of a sampled property check."""
    name: str
    passed: bool
    worst: float
    pairs: int
    label: str = "empirical"


def _check_dim(what, v, expected):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size != expected:
        raise ContractViolationError(what, expected, v.size)
    return v


def pseudo_gradient(game, x, strict=False):
    """
    Evaluate F(x) = col(∇_{x_1} f_1(x), ..., ∇_{x_N} f_N(x)).

    Args:
        game (GameInstance): The game
        x (np.ndarray): Stacked strategy, dimension n
        strict (bool): Feed each oracle a copy of x where every block outside
            interference_neighbors ∪ {i} is NaN, so a non-local read shows up

    Returns:
        np.ndarray: Pseudo-gradient, dimension n

    Raises:
        ContractViolationError: If x has the wrong dimension
        AuditFailure: In strict mode, if an oracle read a non-neighbour block
    """
    x = _check_dim("pseudo_gradient", x, game.n)
    if game.batch_gradient is not None and not strict:
        return np.asarray(game.batch_gradient(x), dtype=float)
    out = np.empty(game.n)
    for i, agent in enumerate(game.agents):
        if strict:
            allowed = set(agent.interference_neighbors) | {i}
            view = np.full(game.n, np.nan)
            for j in allowed:
                view[game.block(j)] = x[game.block(j)]
            grad = np.asarray(agent.grad_f(view), dtype=float)
            if not np.all(np.isfinite(grad)):
                raise AuditFailure(i, "x_j outside interference neighbours")
        else:
            grad = np.asarray(agent.grad_f(x), dtype=float)
        if grad.shape != (agent.dim,):
            raise ContractViolationError(f"grad_f of agent {i}", agent.dim, grad.size)
        out[game.block(i)] = grad
    return out


def _per_agent_steps(game, rho):
    steps = np.broadcast_to(np.asarray(rho, dtype=float), (game.n_agents,))
    if np.any(~(steps > 0)):
        raise ConfigurationError(f"Prox steps must be positive, got {steps}")
    return steps


def apply_prox_block(game, v, rho):
    """
    Block-wise prox^{ρ_i}_{g_i}(v_i).

    Args:
        game (GameInstance): The game
        v (np.ndarray): Point, dimension n
        rho (float | array-like): One positive step per agent (a scalar is broadcast)

    Returns:
        np.ndarray: Prox point, dimension n

    Raises:
        ConfigurationError: If any step is not positive
    """
    v = _check_dim("apply_prox_block", v, game.n)
    steps = _per_agent_steps(game, rho)
    if game.has_boxes:
        # every g_i is a box indicator: one clamp, independent of the steps
        return np.clip(v, game.lower, game.upper)
    out = np.empty(game.n)
    for i, agent in enumerate(game.agents):
        out[game.block(i)] = agent.prox_g(v[game.block(i)], float(steps[i]))
    return out


def consensus_dual(game, lambda_stacked):
    """Mean of the N local dual copies."""
    return np.asarray(lambda_stacked).reshape(game.n_agents, game.m).mean(axis=0)


def kkt_residual(game, x, lambda_stacked, graph):
    """
    Residuals of the v-GNE KKT system at (x, λ).

    Stationarity uses the unit-step prox residual ‖x − prox(x − F(x) − Aᵀλ̄)‖ with λ̄
    the mean of the dual copies. Negative dual entries are clipped and flagged.

    Args:
        game (GameInstance): The game
        x (np.ndarray): Stacked strategy, dimension n
        lambda_stacked (np.ndarray): Local dual copies, dimension mN
        graph (CommGraph): Dual communication graph

    Returns:
        KktResidual
    """
    x = _check_dim("kkt_residual x", x, game.n)
    lam = _check_dim("kkt_residual lambda", lambda_stacked, game.m * game.n_agents)
    if graph.n_agents != game.n_agents:
        raise ContractViolationError("kkt_residual graph", game.n_agents, graph.n_agents)

    clipped = bool(np.any(lam < 0))
    if clipped:
        logger.warning("Negative dual entries clipped before computing KKT residual")
        lam = np.maximum(lam, 0.0)

    lam_bar = consensus_dual(game, lam)
    A = game.coupling_row
    forward = x - pseudo_gradient(game, x) - A.T @ lam_bar
    stationarity = np.linalg.norm(x - apply_prox_block(game, forward, 1.0))
    slack = A @ x - game.b_total
    return KktResidual(
        stationarity=float(stationarity),
        primal_feasibility=float(np.linalg.norm(np.maximum(slack, 0.0))),
        complementarity=float(abs(lam_bar @ slack)),
        dual_consensus=float(np.linalg.norm(laplacian_apply(graph, lam, game.m))),
        dual_clipped=clipped,
    )


def check_feasible(game, x, tol=1e-9):
    """
    Check A x <= b and x_i ∈ dom(g_i) (probed as ‖prox(x_i) − x_i‖ <= tol).

    Returns:
        tuple[bool, np.ndarray]: Feasibility flag and the coupling violation max(Ax − b, 0)
    """
    x = _check_dim("check_feasible", x, game.n)
    violation = np.maximum(game.coupling_row @ x - game.b_total, 0.0)
    local_ok = np.linalg.norm(apply_prox_block(game, x, 1.0) - x) <= tol
    return bool(local_ok and np.all(violation <= tol)), violation


def slater_margin(game):
    """
    Largest s <= 1 with A x + s <= b and lo + s <= x <= hi − s, for box instances.

    Returns:
        float | None: The margin (Slater holds when positive), or None when some agent
        has a non-box local cost and the instance flag has to be trusted
    """
    if not game.has_boxes:
        return None
    n, m = game.n, game.m
    lo, hi = game.lower, game.upper
    A = game.coupling_row
    rows = [np.hstack([A, np.ones((m, 1))])]
    rhs = [game.b_total]
    finite_lo = np.isfinite(lo)
    finite_hi = np.isfinite(hi)
    eye = np.eye(n)
    if finite_lo.any():
        rows.append(np.hstack([-eye[finite_lo], np.ones((finite_lo.sum(), 1))]))
        rhs.append(-lo[finite_lo])
    if finite_hi.any():
        rows.append(np.hstack([eye[finite_hi], np.ones((finite_hi.sum(), 1))]))
        rhs.append(hi[finite_hi])
    c = np.zeros(n + 1)
    c[-1] = -1.0
    result = linprog(
        c, A_ub=np.vstack(rows), b_ub=np.concatenate(rhs),
        bounds=[(None, None)] * n + [(None, 1.0)], method="highs",
    )
    if not result.success:
        logger.warning(f"Slater heuristic LP failed: {result.message}")
        return float("-inf")
    return float(-result.fun)


def sample_points(game, count, rng, scale=1.0):
    """Random points in the local domain: uniform in finite boxes, Gaussian elsewhere."""
    lo, hi = game.lower, game.upper
    pts = scale * rng.standard_normal((count, game.n))
    both = np.isfinite(lo) & np.isfinite(hi)
    pts[:, both] = rng.uniform(lo[both], hi[both], size=(count, both.sum()))
    only_lo = np.isfinite(lo) & ~np.isfinite(hi)
    pts[:, only_lo] = lo[only_lo] + np.abs(pts[:, only_lo])
    only_hi = ~np.isfinite(lo) & np.isfinite(hi)
    pts[:, only_hi] = hi[only_hi] - np.abs(pts[:, only_hi])
    return pts


def _sample_pairs(game, pairs, seed):
    rng = np.random.default_rng(seed)
    xs = sample_points(game, pairs, rng)
    ys = sample_points(game, pairs, rng)
    for x, y in zip(xs, ys):
        if np.linalg.norm(x - y) > 0:
            yield x, y, pseudo_gradient(game, x) - pseudo_gradient(game, y)


def sample_monotonicity(game, pairs=1000, seed=0):
    worst = min(d @ (x - y) for x, y, d in _sample_pairs(game, pairs, seed))
    return Certificate("monotone", worst >= -MONOTONE_SLACK, float(worst), pairs)


def sample_lipschitz(game, beta, pairs=1000, seed=0):
    """Check ‖F(x) − F(y)‖ <= (1/β)‖x − y‖ on sampled pairs; `worst` is the largest ratio."""
    worst = max(np.linalg.norm(d) / np.linalg.norm(x - y) for x, y, d in _sample_pairs(game, pairs, seed))
    return Certificate("lipschitz", worst <= (1.0 / beta) * (1 + LIPSCHITZ_SLACK), float(worst), pairs)


def sample_strong_monotonicity(game, eta, pairs=1000, seed=0):
    """Check ⟨F(x) − F(y), x − y⟩ >= η‖x − y‖²; `worst` is the smallest sampled modulus."""
    worst = min((d @ (x - y)) / np.dot(x - y, x - y) for x, y, d in _sample_pairs(game, pairs, seed))
    return Certificate("strongly_monotone", worst >= eta * (1 - STRONG_MONOTONE_SLACK), float(worst), pairs)


def estimate_inverse_beta(game, pairs=1000, seed=0):
    """Sampled lower bound on the Lipschitz constant 1/β of F (valid for the sampled region only)."""
    return float(max(
        np.linalg.norm(d) / np.linalg.norm(x - y) for x, y, d in _sample_pairs(game, pairs, seed)
    ))


def check_gradient_fd(game, points=100, rel_tol=1e-6, h=1e-6, seed=0):
    """
    Compare every grad_f oracle with central finite differences of its f_value oracle.

    The error at a point is ‖g_fd − g‖ / max(‖g‖, 1).

    Returns:
        Certificate: `worst` is the largest relative error seen; agents without an
        f_value oracle are skipped
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for x in sample_points(game, points, rng):
        for i, agent in enumerate(game.agents):
            if agent.f_value is None:
                continue
            blk = game.block(i)
            grad = np.asarray(agent.grad_f(x), dtype=float)
            fd = np.empty(agent.dim)
            for k in range(agent.dim):
                xp, xm = x.copy(), x.copy()
                xp[blk.start + k] += h
                xm[blk.start + k] -= h
                fd[k] = (agent.f_value(xp) - agent.f_value(xm)) / (2 * h)
            worst = max(worst, np.linalg.norm(fd - grad) / max(np.linalg.norm(grad), 1.0))
    return Certificate("gradient_fd", worst <= rel_tol, float(worst), points)


def affine_constants(M):
    """
    (η, β) for F(x) = M x + q: η = λ_min((M + Mᵀ)/2) clamped at 0, 1/β = ‖M‖.
    """
    M = np.asarray(M, dtype=float)
    sym = 0.5 * (M + M.T)
    eta = max(float(linalg.eigvalsh(sym)[0]), 0.0)
    norm = float(linalg.norm(M, 2))
    beta = 1.0 / norm if norm > 0 else np.inf
    return eta, beta


class BlockAffineGradient:
    """
    ∇_{x_i} f_i(x) = Σ_{j ∈ N_i ∪ {i}} M_ij x_j + q_i, reading only neighbour blocks.
    """

    def __init__(self, blocks, q_i):
        self.blocks = blocks  # [(slice_j, M_ij)]
        self.q_i = np.asarray(q_i, dtype=float)

    def __call__(self, x):
        out = self.q_i.copy()
        for sl, M_ij in self.blocks:
            out += M_ij @ x[sl]
        return out


class BlockQuadraticValue:
    """f_i(x) = ½ x_iᵀ M_ii x_i + Σ_{j≠i} x_iᵀ M_ij x_j + q_iᵀ x_i."""

    def __init__(self, own, blocks, q_i):
        self.own = own
        self.blocks = blocks
        self.q_i = np.asarray(q_i, dtype=float)

    def __call__(self, x):
        sl_i, M_ii = self.own
        xi = x[sl_i]
        value = 0.5 * xi @ M_ii @ xi + self.q_i @ xi
        for sl, M_ij in self.blocks:
            value += xi @ (M_ij @ x[sl])
        return float(value)


def quadratic_game(M, q, dims, coupling_blocks, coupling_offsets, lower=None, upper=None,
                   beta=None, eta=None, kind="quadratic", metadata=None, f_values=None,
                   batch_gradient=None, source=None):
    """
    Game with affine pseudo-gradient F(x) = M x + q and box (or absent) local costs.

    Args:
        M (array-like): n x n matrix
        q (array-like): Vector of dimension n
        dims (list[int]): Per-agent dimensions n_i
        coupling_blocks (list): A_i, each m x n_i
        coupling_offsets (list): b_i, each of dimension m
        lower, upper (array-like | None): Stacked box bounds; None or ±inf means unbounded
        beta, eta (float | None): Declared constants; closed-form values are used when omitted
        kind (str): Label stored in the instance document
        metadata (dict | None): Extra data carried for serialization
        f_values (list | None): Per-agent cost oracles overriding the quadratic default
        batch_gradient (callable | None): Vectorised F replacing M x + q
        source (str | None): Label of the declared constants ("analytic", "declared")

    Returns:
        GameInstance
    """
    M = np.array(M, dtype=float)
    q = np.array(q, dtype=float)
    dims = [int(d) for d in dims]
    n = sum(dims)
    if M.shape != (n, n) or q.shape != (n,):
        raise ValidationError(f"M must be {n}x{n} and q of length {n}")
    blocks_A = [np.array(A, dtype=float) for A in coupling_blocks]
    offsets_b = [np.array(b, dtype=float) for b in coupling_offsets]
    if len(blocks_A) != len(dims) or len(offsets_b) != len(dims):
        raise ValidationError("One coupling block and offset per agent is required.")
    m = blocks_A[0].shape[0]

    lo = np.full(n, -np.inf) if lower is None else np.array(lower, dtype=float)
    hi = np.full(n, np.inf) if upper is None else np.array(upper, dtype=float)
    if np.any(lo > hi):
        raise ValidationError("Box lower bounds must not exceed upper bounds.")

    off = np.concatenate([[0], np.cumsum(dims)]).astype(int)
    sl = [slice(int(off[i]), int(off[i + 1])) for i in range(len(dims))]
    M.setflags(write=False)
    q.setflags(write=False)

    agents = []
    for i, d in enumerate(dims):
        neighbors = frozenset(
            j for j in range(len(dims)) if j != i and np.any(M[sl[i], sl[j]] != 0)
        )
        grad_blocks = [(sl[j], M[sl[i], sl[j]]) for j in sorted(neighbors | {i})]
        other_blocks = [(sl[j], M[sl[i], sl[j]]) for j in sorted(neighbors)]
        lo_i, hi_i = lo[sl[i]], hi[sl[i]]
        boxed = bool(np.any(np.isfinite(lo_i) | np.isfinite(hi_i)))
        f_value = None
        if f_values is not None:
            f_value = f_values[i]
        elif np.allclose(M[sl[i], sl[i]], M[sl[i], sl[i]].T):
            f_value = BlockQuadraticValue((sl[i], M[sl[i], sl[i]]), other_blocks, q[sl[i]])
        agents.append(AgentSpec(
            dim=d,
            grad_f=BlockAffineGradient(grad_blocks, q[sl[i]]),
            prox_g=box_prox(lo_i, hi_i) if boxed else identity_prox,
            coupling_block=blocks_A[i],
            coupling_offset=offsets_b[i],
            interference_neighbors=neighbors,
            f_value=f_value,
            lower=lo_i if boxed else None,
            upper=hi_i if boxed else None,
        ))

    if beta is None or eta is None:
        eta_cf, beta_cf = affine_constants(M)
        beta = beta_cf if beta is None else beta
        eta = eta_cf if eta is None else eta
        source = source or "analytic"
    else:
        source = source or "declared"

    if batch_gradient is None:
        def batch_gradient(x):
            return M @ x + q

    meta = {"lower": lo, "upper": hi}
    meta.update(metadata or {})
    return GameInstance(
        agents=tuple(agents),
        m=m,
        constants=DeclaredConstants(beta=beta, eta=eta, source=source),
        monotone=bool(linalg.eigvalsh(0.5 * (M + M.T))[0] >= -MONOTONE_SLACK),
        kind=kind,
        affine=(M, q),
        batch_gradient=batch_gradient,
        metadata=meta,
    )
