"""
Networked Cournot benchmark: N firms selling into m capacity-limited markets.

Firm i sells x_i ∈ [0, δ_i]^{n_i} into the n_i markets it participates in, pays
c_i(x_i) = π_i ‖x_i‖² + r_iᵀx_i and earns P(x)ᵀA_i x_i with the linear inverse demand
P(x) = P̄ − D A x. Market loads are capped, A x <= b, and b is split evenly, b_i = b/N.

All random parameters come from one `numpy.random.default_rng(seed)` stream, drawn in
this order: participation pattern, δ (N), b (m), π (N), r (firm by firm, n_i each),
P̄ (m), d (m).
"""

from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import linalg

from gne import graph as graphs
from gne.errors import ValidationError
from gne.model import affine_constants, quadratic_game
from utils.log_utils import get_logger

logger = get_logger(__name__)

DEFAULT_CHORDS = ((2, 15), (6, 13))
RANGE_FIELDS = ("delta_range", "market_cap_range", "pi_range", "r_range", "pbar_range", "d_range")


@dataclass(frozen=True)
class CournotParams:
    n_firms: int = 20
    n_markets: int = 7
    delta_range: tuple = (1.0, 1.5)
    market_cap_range: tuple = (0.5, 1.0)
    pi_range: tuple = (1.0, 8.0)
    r_range: tuple = (0.1, 0.6)
    pbar_range: tuple = (2.0, 4.0)
    d_range: tuple = (0.5, 1.0)
    participation: Optional[tuple] = None
    participation_density: float = 0.3
    seed: int = 1
    deterministic: bool = False
    chords: tuple = DEFAULT_CHORDS
    edge_weight: float = 1.0

    def validate(self):
        """
        Raises:
            ValidationError: On empty or non-positive ranges, bad sizes or a firm without a market
        """
        if self.n_firms < 1 or self.n_markets < 1:
            raise ValidationError(f"Need at least one firm and one market, got {self.n_firms}x{self.n_markets}")
        for name in RANGE_FIELDS:
            lo, hi = getattr(self, name)
            if not lo > 0:
                raise ValidationError(f"{name} must have a positive lower bound, got {lo}")
            if not lo <= hi:
                raise ValidationError(f"{name} is empty: [{lo}, {hi}]")
        if not 0 < self.participation_density <= 1:
            raise ValidationError(f"participation_density must lie in (0, 1], got {self.participation_density}")
        if not self.edge_weight > 0:
            raise ValidationError(f"edge_weight must be positive, got {self.edge_weight}")
        if self.participation is not None:
            pattern = np.asarray(self.participation, dtype=bool)
            if pattern.shape != (self.n_firms, self.n_markets):
                raise ValidationError(
                    f"Participation must be {self.n_firms}x{self.n_markets}, got {pattern.shape}"
                )
            empty = np.flatnonzero(~pattern.any(axis=1))
            if empty.size:
                raise ValidationError(f"Firms without any market: {empty.tolist()}")
        return self

    def to_dict(self):
        data = asdict(self)
        data["chords"] = [list(c) for c in self.chords]
        for name in RANGE_FIELDS:
            data[name] = list(getattr(self, name))
        if self.participation is not None:
            data["participation"] = np.asarray(self.participation, dtype=int).tolist()
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"Unknown Cournot parameter(s): {', '.join(sorted(unknown))}")
        for name in RANGE_FIELDS:
            if name in data:
                data[name] = tuple(float(v) for v in data[name])
        if "chords" in data:
            data["chords"] = tuple(tuple(int(v) for v in c) for c in data["chords"])
        if data.get("participation") is not None:
            data["participation"] = tuple(tuple(bool(v) for v in row) for row in data["participation"])
        return cls(**data)


@dataclass(frozen=True)
class CournotData:
    """Every drawn quantity of one Cournot instance."""
    participation: np.ndarray  # N x m, bool
    delta: np.ndarray          # N
    market_caps: np.ndarray    # m
    pi: np.ndarray             # N
    r: tuple                   # per firm, n_i entries
    pbar: np.ndarray           # m
    d: np.ndarray              # m
    params: dict = field(default_factory=dict)

    @property
    def n_firms(self):
        return self.participation.shape[0]

    @property
    def n_markets(self):
        return self.participation.shape[1]

    @property
    def dims(self):
        return [int(k) for k in self.participation.sum(axis=1)]

    def markets_of(self, i):
        return np.flatnonzero(self.participation[i])

    def coupling_blocks(self):
        """A_i: column k routes firm i's k-th quantity into its k-th market."""
        blocks = []
        for i in range(self.n_firms):
            markets = self.markets_of(i)
            A_i = np.zeros((self.n_markets, markets.size))
            A_i[markets, np.arange(markets.size)] = 1.0
            blocks.append(A_i)
        return blocks

    def coupling_row(self):
        return np.hstack(self.coupling_blocks())

    @cached_property
    def stacked(self):
        """(A, 2π_i + d_market per column, stacked r) for the vectorised gradient."""
        blocks = self.coupling_blocks()
        A = np.hstack(blocks)
        market = np.concatenate([self.markets_of(i) for i in range(self.n_firms)])
        two_pi = np.concatenate([np.full(n_i, 2.0 * p) for n_i, p in zip(self.dims, self.pi)])
        return A, two_pi + self.d[market], np.concatenate(self.r)

    def affine_form(self):
        """(M, q) with F(x) = M x + q: M = 2Π + AᵀDA + diag(A_iᵀDA_i), q = r − AᵀP̄."""
        blocks = self.coupling_blocks()
        A = np.hstack(blocks)
        D = np.diag(self.d)
        two_pi = np.concatenate([np.full(n_i, 2.0 * p) for n_i, p in zip(self.dims, self.pi)])
        own = linalg.block_diag(*[A_i.T @ D @ A_i for A_i in blocks])
        M = np.diag(two_pi) + A.T @ D @ A + own
        q = np.concatenate(self.r) - A.T @ self.pbar
        return M, q

    def to_dict(self):
        return {
            "participation": self.participation.astype(int).tolist(),
            "delta": self.delta.tolist(),
            "market_caps": self.market_caps.tolist(),
            "pi": self.pi.tolist(),
            "r": [r_i.tolist() for r_i in self.r],
            "pbar": self.pbar.tolist(),
            "d": self.d.tolist(),
        }

    @classmethod
    def from_dict(cls, data, params=None):
        try:
            return cls(
                participation=np.asarray(data["participation"], dtype=bool),
                delta=np.asarray(data["delta"], dtype=float),
                market_caps=np.asarray(data["market_caps"], dtype=float),
                pi=np.asarray(data["pi"], dtype=float),
                r=tuple(np.asarray(r_i, dtype=float) for r_i in data["r"]),
                pbar=np.asarray(data["pbar"], dtype=float),
                d=np.asarray(data["d"], dtype=float),
                params=dict(params or {}),
            )
        except KeyError as e:
            raise ValidationError(f"Cournot data is missing field {e}")


def draw_participation(n_firms, n_markets, rng, density=0.3):
    """
    Seeded random bipartite firm-market pattern.

    Each pair is kept with probability `density`; then, in index order, every firm
    without a market gets one uniformly drawn market, and every market with fewer than
    min(2, N) firms gets uniformly drawn extra firms.
    """
    pattern = rng.random((n_firms, n_markets)) < density
    for i in range(n_firms):
        if not pattern[i].any():
            pattern[i, rng.integers(n_markets)] = True
    need = min(2, n_firms)
    for j in range(n_markets):
        while pattern[:, j].sum() < need:
            outside = np.flatnonzero(~pattern[:, j])
            pattern[rng.choice(outside), j] = True
    return pattern


def cyclic_participation(n_firms, n_markets):
    """Firm i sells in markets i mod m and (i + 1) mod m."""
    pattern = np.zeros((n_firms, n_markets), dtype=bool)
    for i in range(n_firms):
        pattern[i, i % n_markets] = True
        pattern[i, (i + 1) % n_markets] = True
    return pattern


def draw_data(params):
    """Draw (or, in deterministic mode, set to range midpoints) every instance parameter."""
    params.validate()
    N, m = params.n_firms, params.n_markets
    rng = np.random.default_rng(params.seed)

    if params.participation is not None:
        pattern = np.asarray(params.participation, dtype=bool)
    elif params.deterministic:
        pattern = cyclic_participation(N, m)
    else:
        pattern = draw_participation(N, m, rng, params.participation_density)
    dims = pattern.sum(axis=1)

    def draw(bounds, size):
        lo, hi = bounds
        if params.deterministic:
            return np.full(size, 0.5 * (lo + hi))
        return rng.uniform(lo, hi, size=size)

    delta = draw(params.delta_range, N)
    caps = draw(params.market_cap_range, m)
    pi = draw(params.pi_range, N)
    r = tuple(draw(params.r_range, int(n_i)) for n_i in dims)
    pbar = draw(params.pbar_range, m)
    d = draw(params.d_range, m)
    return CournotData(pattern, delta, caps, pi, r, pbar, d, params=params.to_dict())


class FirmCost:
    """f_i(x) = π_i ‖x_i‖² + r_iᵀx_i − (P̄ − D A x)ᵀ A_i x_i."""

    def __init__(self, data, i, A, block):
        self.pi = float(data.pi[i])
        self.r = data.r[i]
        self.pbar = data.pbar
        self.d = data.d
        self.A = A
        self.A_i = A[:, block]
        self.block = block

    def __call__(self, x):
        x_i = x[self.block]
        price = self.pbar - self.d * (self.A @ x)
        return float(self.pi * x_i @ x_i + self.r @ x_i - price @ (self.A_i @ x_i))


def analytic_pseudo_gradient(source, x):
    """
    Closed-form F(x): ∇_{x_i} f_i = 2π_i x_i + r_i − A_iᵀ(P̄ − D A x) + A_iᵀ D A_i x_i.

    A_iᵀ D A_i is diagonal (each column of A_i hits one market), so the whole map is
    evaluated as (2π + d_col) ∘ x + r − Aᵀ(P̄ − d ∘ A x).

    Args:
        source (CournotData | GameInstance): A Cournot instance or its data
        x (np.ndarray): Stacked quantities
    """
    data = cournot_data(source)
    A, own_diag, r = data.stacked
    x = np.asarray(x, dtype=float)
    return own_diag * x + r - A.T @ (data.pbar - data.d * (A @ x))


def analytic_constants(source):
    """(η, β) from the affine form: η = λ_min(sym M) clamped at 0, 1/β = ‖M‖₂."""
    M, _ = cournot_data(source).affine_form()
    return affine_constants(M)


def cournot_data(source):
    if isinstance(source, CournotData):
        return source
    data = getattr(source, "metadata", {}).get("cournot")
    if data is None:
        raise ValidationError("Instance was not generated by the Cournot model.")
    return data


def comm_graph(n_firms, chords=DEFAULT_CHORDS, weight=1.0):
    """Cycle over the firms plus the chords (1-based) that fit; a single firm gets an edgeless graph."""
    if n_firms == 1:
        return graphs.build_graph(np.zeros((1, 1)))
    usable = [(a, b) for a, b in chords if max(a, b) <= n_firms and a != b]
    dropped = len(chords) - len(usable)
    if dropped:
        logger.debug(f"Dropped {dropped} chord(s) that do not fit {n_firms} firms")
    return graphs.cycle_plus_chords(n_firms, usable, weight)


def build_game(data):
    """GameInstance for drawn Cournot data, with the analytic gradient as the batch oracle."""
    M, q = data.affine_form()
    blocks = data.coupling_blocks()
    A = np.hstack(blocks)
    b_share = data.market_caps / data.n_firms
    dims = data.dims
    lower = np.zeros(sum(dims))
    upper = np.concatenate([np.full(n_i, data.delta[i]) for i, n_i in enumerate(dims)])
    offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)
    costs = [FirmCost(data, i, A, slice(int(offsets[i]), int(offsets[i + 1]))) for i in range(data.n_firms)]
    eta, beta = affine_constants(M)
    return quadratic_game(
        M, q, dims, blocks, [b_share.copy() for _ in range(data.n_firms)],
        lower=lower, upper=upper, beta=beta, eta=eta, kind="cournot",
        metadata={"cournot": data}, f_values=costs,
        batch_gradient=lambda x: analytic_pseudo_gradient(data, x),
        source="analytic",
    )


def generate(params=None):
    """
    Build the Cournot game and its communication graph.

    Args:
        params (CournotParams | None): Defaults to 20 firms, 7 markets, seed 1

    Returns:
        tuple[GameInstance, CommGraph]

    Raises:
        ValidationError: On invalid params (empty ranges, firms without a market)
    """
    params = params or CournotParams()
    data = draw_data(params)
    game = build_game(data)
    graph = comm_graph(params.n_firms, params.chords, params.edge_weight)
    logger.debug(
        f"Cournot instance: {data.n_firms} firms, {data.n_markets} markets, n={game.n}, "
        f"η={game.constants.eta:.4g}, 1/β={1.0 / game.constants.beta:.4g}"
    )
    return game, graph
