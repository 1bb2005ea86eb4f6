"""
Dual-consensus communication graph: weighted Laplacian and spectral bounds.
"""

from dataclasses import dataclass

import networkx as nx
import numpy as np
from networkx.utils import UnionFind
from scipy import linalg
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from gne.errors import (
    AssumptionViolationError,
    ContractViolationError,
    SpectralConvergenceError,
    ValidationError,
)

SYMMETRY_TOL = 1e-12
POWER_ITERATION_SEED = 20200101
DENSE_SPECTRAL_LIMIT = 2000


@dataclass(frozen=True)
class CommGraph:
    """Immutable weighted communication graph for the dual variables."""
    weights: np.ndarray
    laplacian: np.ndarray
    max_degree: float
    op_norm: float
    neighbor_lists: tuple

    @property
    def n_agents(self):
        return self.weights.shape[0]

    @property
    def degrees(self):
        return self.weights.sum(axis=1)

    def edges(self):
        """Edge list [(i, j, w)] with i < j, 0-based."""
        n = self.n_agents
        return [
            (i, j, float(self.weights[i, j]))
            for i in range(n) for j in range(i + 1, n)
            if self.weights[i, j] > 0
        ]


def build_graph(weights):
    """
    Validate a weighted adjacency matrix and derive L, Δ, κ and neighbour lists.

    Args:
        weights (array-like): Symmetric N x N matrix, nonnegative, zero diagonal

    Returns:
        CommGraph: Graph with all derived fields populated

    Raises:
        ValidationError: If the matrix is not square, symmetric, nonnegative or has a nonzero diagonal
        AssumptionViolationError: If the graph is disconnected (names the components)
    """
    W = np.array(weights, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] == 0:
        raise ValidationError(f"Weight matrix must be square and non-empty, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise ValidationError("Weight matrix contains non-finite entries.")
    if np.max(np.abs(W - W.T)) > SYMMETRY_TOL:
        raise ValidationError("Weight matrix is not symmetric.")
    if np.any(np.abs(np.diag(W)) > SYMMETRY_TOL):
        raise ValidationError("Weight matrix must have a zero diagonal.")
    if np.any(W < 0):
        raise ValidationError("Weight matrix must be nonnegative.")

    # Symmetrize exactly so L is symmetric to the last bit.
    W = 0.5 * (W + W.T)
    np.fill_diagonal(W, 0.0)

    components = connected_components(W)
    if len(components) > 1:
        raise AssumptionViolationError(
            f"Communication graph is disconnected ({len(components)} components: {components})",
            components=components,
        )

    degrees = W.sum(axis=1)
    L = np.diag(degrees) - W
    n = W.shape[0]
    neighbor_lists = tuple(
        tuple(int(j) for j in np.flatnonzero(W[i] > 0)) for i in range(n)
    )
    kappa = spectral_norm(L, n) if n > 1 else 0.0
    W.setflags(write=False)
    L.setflags(write=False)
    return CommGraph(
        weights=W,
        laplacian=L,
        max_degree=float(degrees.max()) if n else 0.0,
        op_norm=float(kappa),
        neighbor_lists=neighbor_lists,
    )


def connected_components(weights):
    """Components of the positive-weight edge set, as sorted lists of 0-based indices."""
    n = weights.shape[0]
    uf = UnionFind(range(n))
    rows, cols = np.nonzero(np.triu(weights, k=1) > 0)
    for i, j in zip(rows, cols):
        uf.union(int(i), int(j))
    return sorted(sorted(group) for group in uf.to_sets())


def cycle(n_agents, weight=1.0):
    return from_networkx(nx.cycle_graph(n_agents), n_agents, weight)


def cycle_plus_chords(n_agents, chords, weight=1.0):
    """
    Cycle graph with extra edges.

    Args:
        n_agents (int): Number of agents
        chords (list[tuple]): Extra edges, 1-based agent labels (e.g. [(2, 15), (6, 13)])
        weight (float): Weight of every edge

    Returns:
        CommGraph
    """
    g = nx.cycle_graph(n_agents)
    for a, b in chords:
        if not (1 <= a <= n_agents and 1 <= b <= n_agents) or a == b:
            raise ValidationError(f"Invalid chord ({a}, {b}) for {n_agents} agents")
        g.add_edge(a - 1, b - 1)
    return from_networkx(g, n_agents, weight)


def complete(n_agents, weight=1.0):
    return from_networkx(nx.complete_graph(n_agents), n_agents, weight)


def from_edges(n_agents, edges):
    """Graph from a 0-based weighted edge list [(i, j, w)]."""
    W = np.zeros((n_agents, n_agents))
    for i, j, w in edges:
        if not (0 <= i < n_agents and 0 <= j < n_agents) or i == j:
            raise ValidationError(f"Invalid edge ({i}, {j})")
        if w <= 0:
            raise ValidationError(f"Edge ({i}, {j}) needs a positive weight, got {w}")
        W[i, j] = W[j, i] = float(w)
    return build_graph(W)


def from_networkx(g, n_agents, weight=1.0):
    # cycle_graph(1) carries a self-loop
    g.remove_edges_from(list(nx.selfloop_edges(g)))
    nx.set_edge_attributes(g, float(weight), "weight")
    W = nx.to_numpy_array(g, nodelist=range(n_agents), weight="weight")
    return build_graph(W)


def laplacian_apply(graph, stacked, m=None):
    """
    Apply the tensorized Laplacian (L ⊗ I_m) blockwise, without forming the Kronecker product.

    Args:
        graph (CommGraph): Communication graph
        stacked (np.ndarray): Vector of N blocks of size m
        m (int): Block size; inferred from the length when omitted

    Returns:
        np.ndarray: (L ⊗ I_m) @ stacked
    """
    v = np.asarray(stacked, dtype=float)
    n = graph.n_agents
    if m is None:
        if v.ndim != 1 or v.size % n != 0 or v.size == 0:
            raise ContractViolationError("laplacian_apply", f"multiple of {n}", v.size)
        m = v.size // n
    elif v.shape != (n * m,):
        raise ContractViolationError("laplacian_apply", n * m, v.size)
    return (graph.laplacian @ v.reshape(n, m)).reshape(-1)


def spectral_norm(operator, dimension, tol=1e-8, max_iter=10000, method="auto",
                  seed=POWER_ITERATION_SEED):
    """
    Spectral norm of a linear operator.

    Dense matrices below DENSE_SPECTRAL_LIMIT columns are handled exactly via singular
    values; everything else uses power iteration on the Gram operator AᵀA started
    from a fixed-seed Gaussian vector.

    Args:
        operator: ndarray, sparse matrix or scipy LinearOperator with `dimension` columns
        dimension (int): Number of columns of the operator
        tol (float): Relative accuracy for power iteration
        max_iter (int): Power iteration cap
        method (str): "auto", "dense" or "power"

    Returns:
        float: ‖operator‖₂

    Raises:
        SpectralConvergenceError: If power iteration reaches the cap
    """
    if dimension == 0:
        return 0.0
    if method not in ("auto", "dense", "power"):
        raise ValidationError(f"Unknown spectral norm method '{method}'")

    is_dense = isinstance(operator, np.ndarray)
    if method == "dense" or (method == "auto" and is_dense and dimension < DENSE_SPECTRAL_LIMIT):
        if isinstance(operator, LinearOperator):
            dense = operator @ np.eye(dimension)
        else:
            dense = np.asarray(operator.toarray() if hasattr(operator, "toarray") else operator, dtype=float)
        if dense.size == 0:
            return 0.0
        return float(linalg.svdvals(dense).max())

    op = aslinearoperator(operator)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dimension)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(max_iter):
        w = op.rmatvec(op.matvec(v))
        w_norm = np.linalg.norm(w)
        if w_norm == 0.0:
            return 0.0
        new_estimate = float(np.sqrt(max(v @ w, 0.0)))
        if abs(new_estimate - estimate) <= tol * new_estimate:
            return new_estimate
        estimate = new_estimate
        v = w / w_norm
    raise SpectralConvergenceError(estimate, max_iter)
