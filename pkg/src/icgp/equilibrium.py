"""Best responses and Nash-equilibrium gaps.

A product policy for one player is an array ``(H, S, K)`` of action
distributions; a joint policy is ``(H, S, A, B)``. All values are computed
exactly by backward induction in float64.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .games import MarkovGame

DIST_TOL = 1e-9


def check_distribution(p: np.ndarray, axis=-1, name: str = "policy") -> None:
    p = np.asarray(p)
    if np.any(p < -DIST_TOL) or not np.all(np.isfinite(p)):
        raise ValueError(f"{name} has negative or non-finite entries")
    if np.max(np.abs(p.sum(axis=axis) - 1.0), initial=0.0) > DIST_TOL:
        raise ValueError(f"{name} rows must sum to 1")


def _check_product(game: MarkovGame, pol: np.ndarray, k: int, name: str) -> np.ndarray:
    pol = np.asarray(pol, dtype=float)
    if pol.shape != (game.H, game.S, k):
        raise ValueError(f"{name} shape {pol.shape} != {(game.H, game.S, k)}")
    check_distribution(pol, name=name)
    return pol


def _continuation(game: MarkovGame, h: int, v_next: np.ndarray) -> np.ndarray:
    # Q(s, a, b) = r + E[V_{h+1}(s')]
    if h == game.H - 1:
        return game.reward[h]
    return game.reward[h] + game.transition[h] @ v_next


def best_response_value_min_side(game: MarkovGame, mu: np.ndarray) -> float:
    """V^{mu, dagger}(s1): the min-player best-responds to ``mu``."""
    mu = _check_product(game, mu, game.A, "mu")
    v = np.zeros(game.S)
    for h in reversed(range(game.H)):
        q = _continuation(game, h, v)
        v = np.einsum("sa,sab->sb", mu[h], q).min(axis=1)
    return float(v[game.initial_state])


def best_response_value_max_side(game: MarkovGame, nu: np.ndarray) -> float:
    """V^{dagger, nu}(s1): the max-player best-responds to ``nu``."""
    nu = _check_product(game, nu, game.B, "nu")
    v = np.zeros(game.S)
    for h in reversed(range(game.H)):
        q = _continuation(game, h, v)
        v = np.einsum("sb,sab->sa", nu[h], q).max(axis=1)
    return float(v[game.initial_state])


def best_response_min_policy(game: MarkovGame, mu: np.ndarray) -> np.ndarray:
    """Deterministic min-player best response, ties to the lowest index."""
    mu = _check_product(game, mu, game.A, "mu")
    out = np.zeros((game.H, game.S, game.B))
    v = np.zeros(game.S)
    for h in reversed(range(game.H)):
        vals = np.einsum("sa,sab->sb", mu[h], _continuation(game, h, v))
        idx = vals.argmin(axis=1)
        out[h, np.arange(game.S), idx] = 1.0
        v = vals[np.arange(game.S), idx]
    return out


def best_response_max_policy(game: MarkovGame, nu: np.ndarray) -> np.ndarray:
    """Deterministic max-player best response, ties to the lowest index."""
    nu = _check_product(game, nu, game.B, "nu")
    out = np.zeros((game.H, game.S, game.A))
    v = np.zeros(game.S)
    for h in reversed(range(game.H)):
        vals = np.einsum("sb,sab->sa", nu[h], _continuation(game, h, v))
        idx = vals.argmax(axis=1)
        out[h, np.arange(game.S), idx] = 1.0
        v = vals[np.arange(game.S), idx]
    return out


def policy_value(game: MarkovGame, mu: np.ndarray, nu: np.ndarray) -> float:
    """V^{mu, nu}(s1) for a product policy pair."""
    mu = _check_product(game, mu, game.A, "mu")
    nu = _check_product(game, nu, game.B, "nu")
    v = np.zeros(game.S)
    for h in reversed(range(game.H)):
        q = _continuation(game, h, v)
        v = np.einsum("sa,sab,sb->s", mu[h], q, nu[h])
    return float(v[game.initial_state])


def ne_gap(game: MarkovGame, mu: np.ndarray, nu: np.ndarray, clamp: bool = False) -> float:
    """V^{dagger, nu}(s1) - V^{mu, dagger}(s1).

    Unclamped by default; weak duality keeps it above -1e-9 up to roundoff.
    ``clamp=True`` floors the value at zero for reporting.
    """
    gap = best_response_value_max_side(game, nu) - best_response_value_min_side(game, mu)
    return max(gap, 0.0) if clamp else gap


def matrix_ne_gap(R: np.ndarray, mu_bar: np.ndarray, nu_bar: np.ndarray) -> float:
    """max_a (R nu)_a - min_b (mu^T R)_b."""
    R = np.asarray(R, dtype=float)
    if not np.all(np.isfinite(R)):
        raise ValueError("payoff matrix must be finite")
    check_distribution(mu_bar, name="mu_bar")
    check_distribution(nu_bar, name="nu_bar")
    return float(np.max(R @ nu_bar) - np.min(mu_bar @ R))


def running_average_policy(history: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of a nonempty list of distributions."""
    if len(history) == 0:
        raise ValueError("history must be nonempty")
    arr = np.asarray(history, dtype=float)
    check_distribution(arr, name="history")
    return arr.mean(axis=0)


def running_average_curve(policies: np.ndarray) -> np.ndarray:
    """Prefix means: row t is the mean of rows 0..t."""
    policies = np.asarray(policies, dtype=float)
    counts = np.arange(1, policies.shape[0] + 1).reshape((-1,) + (1,) * (policies.ndim - 1))
    return np.cumsum(policies, axis=0) / counts


def marginals(joint: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row and column marginals of a joint policy ``(..., A, B)``."""
    joint = np.asarray(joint, dtype=float)
    return joint.sum(axis=-1), joint.sum(axis=-2)
