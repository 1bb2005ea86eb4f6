"""
Operator splitting of the v-GNE inclusion 0 ∈ 𝓐u + 𝓑u + 𝓒u over u = (x, z, λ).

    𝓐(u) = col(F(x), 0, L̄λ + b̄)
    𝓑(u) = col(𝐀ᵀλ, L̄λ, −𝐀x − L̄z)
    𝓒(u) = ∂g(x) × {0} × N_{λ ≥ 0}(λ)

with L̄ = L ⊗ I_m and 𝐀 = diag(A_1, ..., A_N).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from gne.errors import ConfigurationError, ContractViolationError, StepSizeRejectedError
from gne.graph import laplacian_apply, spectral_norm
from gne.model import apply_prox_block, estimate_inverse_beta, pseudo_gradient
from utils.log_utils import get_logger

logger = get_logger(__name__)

DENSE_ASSEMBLY_LIMIT = 500


@dataclass
class Iterate:
    """Stacked primal decisions x, auxiliary variables z and local dual copies λ."""
    x: np.ndarray
    z: np.ndarray
    lam: np.ndarray

    def stack(self):
        return np.concatenate([self.x, self.z, self.lam])

    @classmethod
    def from_stacked(cls, v, n, mN):
        v = np.asarray(v, dtype=float)
        if v.shape != (n + 2 * mN,):
            raise ContractViolationError("Iterate.from_stacked", n + 2 * mN, v.size)
        return cls(v[:n].copy(), v[n:n + mN].copy(), v[n + mN:].copy())

    @classmethod
    def zeros(cls, n, mN):
        return cls(np.zeros(n), np.zeros(mN), np.zeros(mN))

    def copy(self):
        return Iterate(self.x.copy(), self.z.copy(), self.lam.copy())

    def __add__(self, other):
        return Iterate(self.x + other.x, self.z + other.z, self.lam + other.lam)

    def __sub__(self, other):
        return Iterate(self.x - other.x, self.z - other.z, self.lam - other.lam)

    def norm(self):
        return float(np.sqrt(self.x @ self.x + self.z @ self.z + self.lam @ self.lam))

    def is_finite(self):
        return bool(np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.z))
                    and np.all(np.isfinite(self.lam)))


@dataclass(frozen=True)
class ConstantsBundle:
    """
    Monotonicity/Lipschitz constants of the splitting.

    L_A = 1/β + κ, L_B = 2|𝐀| + 2κ, L_D = L_A + L_B and, when η > 0,
    θ = min{1/(2Δ), ηβ²} (used as the working cocoercivity constant of 𝓐).
    """
    beta: float
    eta: float
    kappa: float
    delta_deg: float
    a_norm: float
    L_A: float
    L_B: float
    L_D: float
    theta: Optional[float]
    source: str = "declared"

    @property
    def strongly_monotone(self):
        return self.eta > 0


@dataclass(frozen=True)
class StepConfig:
    """Per-agent diagonal blocks ρ_i, σ_i, τ_i of the step matrix Ψ⁻¹."""
    rho: np.ndarray
    sigma: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        for name in ("rho", "sigma", "tau"):
            values = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if values.size == 0 or np.any(~(values > 0)) or np.any(~np.isfinite(values)):
                raise ConfigurationError(f"Step sizes {name} must be positive and finite, got {values}")
            object.__setattr__(self, name, values)

    @classmethod
    def uniform(cls, value, n_agents):
        return cls(np.full(n_agents, value), np.full(n_agents, value), np.full(n_agents, value))

    @property
    def psi_inv_norm(self):
        """|Ψ⁻¹|, the largest diagonal step."""
        return float(max(self.rho.max(), self.sigma.max(), self.tau.max()))

    def expanded(self, dims, m):
        """Diagonals of Ψ⁻¹ for the x, z and λ blocks."""
        return (np.repeat(self.rho, dims), np.repeat(self.sigma, m), np.repeat(self.tau, m))

    def as_dict(self):
        return {"rho": self.rho.tolist(), "sigma": self.sigma.tolist(), "tau": self.tau.tolist()}


@dataclass(frozen=True)
class PhiCertificate:
    matrix: np.ndarray
    min_eigenvalue: float


class Splitting:
    """
    Matrix-free operators 𝓐, 𝓑, 𝓓 and the resolvent of 𝓒 bound to one game and graph.

    `grad_evals` counts pseudo-gradient evaluations made through 𝓐 and 𝓓.
    """

    def __init__(self, game, graph):
        if graph.n_agents != game.n_agents:
            raise ContractViolationError("Splitting graph", game.n_agents, graph.n_agents)
        self.game = game
        self.graph = graph
        self.m = game.m
        self.n = game.n
        self.mN = game.m * game.n_agents
        self.A_stacked = game.stacked_coupling
        self.b_bar = game.b_stacked
        self.grad_evals = 0

    def _check(self, u):
        if u.x.shape != (self.n,) or u.z.shape != (self.mN,) or u.lam.shape != (self.mN,):
            raise ContractViolationError(
                "Iterate", (self.n, self.mN, self.mN), (u.x.size, u.z.size, u.lam.size)
            )

    def L_bar(self, v):
        return laplacian_apply(self.graph, v, self.m)

    def F(self, x):
        self.grad_evals += 1
        return pseudo_gradient(self.game, x)

    def op_A(self, u):
        self._check(u)
        return Iterate(self.F(u.x), np.zeros(self.mN), self.L_bar(u.lam) + self.b_bar)

    def op_B(self, u):
        self._check(u)
        L_lam = self.L_bar(u.lam)
        return Iterate(
            self.A_stacked.T @ u.lam,
            L_lam,
            -(self.A_stacked @ u.x) - self.L_bar(u.z),
        )

    def op_D(self, u):
        """𝓐u + 𝓑u in one pass (a single pseudo-gradient evaluation)."""
        self._check(u)
        L_lam = self.L_bar(u.lam)
        return Iterate(
            self.F(u.x) + self.A_stacked.T @ u.lam,
            L_lam,
            L_lam + self.b_bar - self.A_stacked @ u.x - self.L_bar(u.z),
        )

    def resolvent_C(self, v, steps):
        """J_{Ψ⁻¹𝓒}: block prox on x, identity on z, projection onto λ >= 0."""
        self._check(v)
        return Iterate(
            apply_prox_block(self.game, v.x, steps.rho),
            v.z.copy(),
            np.maximum(v.lam, 0.0),
        )

    def apply_step(self, steps, u):
        """Ψ⁻¹ u."""
        rx, sz, tl = steps.expanded(self.game.dims, self.m)
        return Iterate(rx * u.x, sz * u.z, tl * u.lam)

    def psi_norm(self, steps, u):
        """‖u‖_Ψ with Ψ = diag(ρ⁻¹, σ⁻¹, τ⁻¹)."""
        rx, sz, tl = steps.expanded(self.game.dims, self.m)
        return float(np.sqrt(u.x @ (u.x / rx) + u.z @ (u.z / sz) + u.lam @ (u.lam / tl)))

    # Dense assembly, used as a brute-force oracle in tests.

    def _require_dense(self):
        size = self.n + 2 * self.mN
        if size > DENSE_ASSEMBLY_LIMIT:
            raise ConfigurationError(f"Dense assembly limited to dimension {DENSE_ASSEMBLY_LIMIT}, got {size}")

    def dense_laplacian(self):
        return np.kron(self.graph.laplacian, np.eye(self.m))

    def dense_operator_B(self):
        self._require_dense()
        n, mN = self.n, self.mN
        Lb = self.dense_laplacian()
        A = self.A_stacked
        B = np.zeros((n + 2 * mN, n + 2 * mN))
        B[:n, n + mN:] = A.T
        B[n:n + mN, n + mN:] = Lb
        B[n + mN:, :n] = -A
        B[n + mN:, n:n + mN] = -Lb
        return B

    def dense_operator_A(self):
        """(matrix, offset) with 𝓐u = matrix @ u + offset, for affine F."""
        self._require_dense()
        if self.game.affine is None:
            raise ConfigurationError("Dense 𝓐 needs an affine pseudo-gradient.")
        M, q = self.game.affine
        n, mN = self.n, self.mN
        mat = np.zeros((n + 2 * mN, n + 2 * mN))
        mat[:n, :n] = M
        mat[n + mN:, n + mN:] = self.dense_laplacian()
        offset = np.concatenate([q, np.zeros(mN), self.b_bar])
        return mat, offset


def compute_constants(game, graph, allow_sampling=True, pairs=1000, seed=0):
    """
    Populate the constants of the splitting for a game on a graph.

    Args:
        game (GameInstance): Game with declared β/η where known
        graph (CommGraph): Communication graph
        allow_sampling (bool): Estimate 1/β by sampling when β is not declared
        pairs (int): Sample pairs for the estimate
        seed (int): Sampling seed

    Returns:
        ConstantsBundle

    Raises:
        ConfigurationError: If β is missing and sampling is disabled
    """
    beta = game.constants.beta
    source = game.constants.source
    if beta is None:
        if not allow_sampling:
            raise ConfigurationError("β is not declared and sampling is disabled.")
        inv_beta = estimate_inverse_beta(game, pairs=pairs, seed=seed)
        beta = 1.0 / inv_beta if inv_beta > 0 else np.inf
        source = "empirical"
        logger.warning("β estimated by sampling; the bound certifies only the sampled region")

    eta = float(game.constants.eta or 0.0)
    inv_beta = 0.0 if np.isinf(beta) else 1.0 / beta
    kappa = float(graph.op_norm)
    delta = float(graph.max_degree)
    a_norm = spectral_norm(game.stacked_coupling, game.n)
    L_A = inv_beta + kappa
    L_B = 2.0 * a_norm + 2.0 * kappa
    theta = None
    if eta > 0:
        degree_term = np.inf if delta == 0 else 1.0 / (2.0 * delta)
        theta = float(min(degree_term, eta * beta ** 2))
    return ConstantsBundle(
        beta=float(beta), eta=eta, kappa=kappa, delta_deg=delta, a_norm=float(a_norm),
        L_A=float(L_A), L_B=float(L_B), L_D=float(L_A + L_B), theta=theta, source=source,
    )


def dense_phi_fb(steps, game, graph):
    """Φ_FB = [[ρ⁻¹, 0, −𝐀ᵀ], [0, σ⁻¹, −L̄], [−𝐀, −L̄, τ⁻¹]] as a dense matrix."""
    n, m, N = game.n, game.m, game.n_agents
    mN = m * N
    rx, sz, tl = steps.expanded(game.dims, m)
    A = game.stacked_coupling
    Lb = np.kron(graph.laplacian, np.eye(m))
    phi = np.zeros((n + 2 * mN, n + 2 * mN))
    phi[:n, :n] = np.diag(1.0 / rx)
    phi[n:n + mN, n:n + mN] = np.diag(1.0 / sz)
    phi[n + mN:, n + mN:] = np.diag(1.0 / tl)
    phi[:n, n + mN:] = -A.T
    phi[n + mN:, :n] = -A
    phi[n:n + mN, n + mN:] = -Lb
    phi[n + mN:, n:n + mN] = -Lb
    return phi


def build_phi_fb(steps, game, graph):
    """
    Assemble Φ_FB and certify it is positive definite.

    Returns:
        PhiCertificate: The matrix and its smallest eigenvalue

    Raises:
        StepSizeRejectedError: If the smallest eigenvalue is not positive
    """
    phi = dense_phi_fb(steps, game, graph)
    min_eig = float(linalg.eigvalsh(phi)[0])
    if not min_eig > 0:
        raise StepSizeRejectedError(min_eig)
    return PhiCertificate(matrix=phi, min_eigenvalue=min_eig)
