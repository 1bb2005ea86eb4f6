"""
Small games shared by the verify_* suites.
"""

import numpy as np

from gne import graph as graphs
from gne.cournot import CournotParams, generate
from gne.model import quadratic_game


def single_node():
    return graphs.build_graph(np.zeros((1, 1)))


def scalar_game(M, q, A=0.0, b=1.0, lower=None, upper=None, beta=None, eta=None):
    """One agent, one decision, one coupling row: F(x) = M x + q, A x <= b."""
    return quadratic_game(
        [[M]], [q], [1], [[[A]]], [[b]],
        lower=None if lower is None else [lower],
        upper=None if upper is None else [upper],
        beta=beta, eta=eta,
    )


def trivial_game():
    """f(x) = ½(x − 1)² with the inactive constraint x <= 5; x* = 1, λ* = 0."""
    return scalar_game(1.0, -1.0, A=1.0, b=5.0)


def skew_game():
    """f_1 = x_1 x_2, f_2 = −x_1 x_2 on a 2-node graph: monotone, not strongly."""
    game = quadratic_game(
        [[0.0, 1.0], [-1.0, 0.0]], [0.0, 0.0], [1, 1],
        [[[0.0]], [[0.0]]], [[1.0], [1.0]],
    )
    return game, graphs.complete(2)


def small_cournot_params(seed=1, **overrides):
    """Four firms in two markets with narrow cost and price ranges, so runs stay short."""
    values = dict(n_firms=4, n_markets=2, pi_range=(1.0, 1.2), d_range=(0.5, 0.6), seed=seed)
    values.update(overrides)
    return CournotParams(**values)


def small_cournot(seed=1, **overrides):
    return generate(small_cournot_params(seed, **overrides))
