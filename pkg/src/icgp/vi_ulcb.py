"""Centralized VI-ULCB with an MWU coarse-correlated-equilibrium planner."""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .no_regret import mwu_cce


class ViUlcb:
    """Upper/lower confidence value iteration for a two-player zero-sum game.

    ``G`` is the episode budget; it fixes the log factor
    ``iota = ln(S A B T / delta)`` with ``T = G H`` and the default number of
    MWU rounds (``n_mwu = G``).
    """

    def __init__(self, H: int, S: int, A: int, B: int, G: int, c: float = 1.0,
                 delta: Optional[float] = None, n_mwu: Optional[int] = None):
        if min(H, S, A, B, G) < 1:
            raise ValueError("dimensions must be positive")
        T = G * H
        if delta is None:
            delta = 1.0 / T
        if not 0.0 < delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        self.H, self.S, self.A, self.B, self.G = H, S, A, B, G
        self.c = float(c)
        self.delta = float(delta)
        self.n_mwu = G if n_mwu is None else int(n_mwu)
        self.iota = math.log(S * A * B * T / delta)
        self.counts = np.zeros((H, S, A, B), dtype=np.int64)
        self.next_counts = np.zeros((H, S, A, B, S), dtype=np.int64)
        self.reward_sum = np.zeros((H, S, A, B))
        self.Q_upper = np.full((H, S, A, B), float(H))
        self.Q_lower = np.zeros((H, S, A, B))
        self.V_upper = np.zeros((H + 1, S))
        self.V_lower = np.zeros((H + 1, S))
        self.policy: Optional[np.ndarray] = None  # (H, S, A, B)
        self.policy_history: list[np.ndarray] = []

    @property
    def r_hat(self) -> np.ndarray:
        return np.divide(self.reward_sum, self.counts, out=np.zeros_like(self.reward_sum),
                         where=self.counts > 0)

    @property
    def P_hat(self) -> np.ndarray:
        n = self.counts[..., None].astype(float)
        return np.divide(self.next_counts, n, out=np.zeros(self.next_counts.shape), where=n > 0)

    def bonus(self, n: np.ndarray) -> np.ndarray:
        return self.c * np.sqrt(self.H ** 2 * self.S * self.iota / n)

    def plan(self) -> np.ndarray:
        """Backward pass over steps; stores and returns the joint policy table."""
        H = float(self.H)
        r_hat, P_hat = self.r_hat, self.P_hat
        policy = np.empty((self.H, self.S, self.A, self.B))
        self.V_upper[self.H] = 0.0
        self.V_lower[self.H] = 0.0
        for h in reversed(range(self.H)):
            visited = self.counts[h] > 0
            if visited.any():
                n = np.maximum(self.counts[h], 1)
                bonus = self.bonus(n)
                up = r_hat[h] + P_hat[h] @ self.V_upper[h + 1] + bonus
                lo = r_hat[h] + P_hat[h] @ self.V_lower[h + 1] - bonus
                self.Q_upper[h] = np.where(visited, np.minimum(up, H), H)
                self.Q_lower[h] = np.where(visited, np.maximum(lo, 0.0), 0.0)
            pi = mwu_cce(self.Q_upper[h], self.Q_lower[h], H, self.n_mwu).joint_policy
            policy[h] = pi
            self.V_upper[h] = np.sum(pi * self.Q_upper[h], axis=(1, 2))
            self.V_lower[h] = np.sum(pi * self.Q_lower[h], axis=(1, 2))
        self.policy = policy
        self.policy_history.append(policy)
        return policy

    def act(self, h: int, s: int, rng: np.random.Generator) -> tuple[int, int]:
        if self.policy is None:
            raise RuntimeError("plan() must run before act()")
        p = self.policy[h, s].ravel()
        k = int(rng.choice(p.size, p=p / p.sum()))
        return divmod(k, self.B)

    def update(self, h: int, s: int, a: int, b: int, r: float, s_next: int) -> None:
        self.counts[h, s, a, b] += 1
        self.next_counts[h, s, a, b, s_next] += 1
        self.reward_sum[h, s, a, b] += r

    def output(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Marginals of two independently, uniformly drawn episode policies."""
        if not self.policy_history:
            raise RuntimeError("no episodes recorded")
        G = len(self.policy_history)
        g, g2 = int(rng.integers(G)), int(rng.integers(G))
        return self.policy_history[g].sum(axis=-1), self.policy_history[g2].sum(axis=-2)
