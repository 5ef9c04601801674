"""Decentralized V-learning for one player, plus its output-policy executor.

Each player runs its own learner on its own observations. The min-player's
learner is fed ``1 - r`` so both learners maximize their reward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .no_regret import softmax


def schedules(n: int, H: int, A: int, S: int, G: int, c: float = 1.0,
              delta: Optional[float] = None) -> tuple[float, float, float]:
    """Return ``(alpha_n, beta_n, gamma_n)``; the learning rate eta_n equals gamma_n."""
    if n < 1:
        raise ValueError("visit count must be >= 1")
    if delta is None:
        delta = 1.0 / (G * H)
    alpha = (H + 1) / (H + n)
    beta = c * math.sqrt(H ** 3 * A * math.log(H * S * A * G / delta) / n)
    gamma = math.sqrt(H * math.log(A) / (A * n))
    return alpha, beta, gamma


def step_size(n: int, H: int) -> float:
    return (H + 1) / (H + n)


def alpha_weights(n: int, H: int) -> np.ndarray:
    """Weights alpha_{n,i} = alpha_i * prod_{j=i+1..n} (1 - alpha_j), i = 1..n."""
    if n < 1:
        raise ValueError("n must be >= 1")
    alphas = (H + 1) / (H + np.arange(1, n + 1, dtype=float))
    keep = 1.0 - alphas
    # tail[i] = prod_{j>i} (1 - alpha_j)
    tail = np.ones(n)
    tail[:-1] = np.cumprod(keep[::-1])[::-1][1:]
    return alphas * tail


@dataclass
class PolicyHistory:
    """Per-(h, s) visit log: episode index and the policy played at that visit."""

    H: int
    S: int
    episodes: list = field(default=None)
    snapshots: list = field(default=None)

    def __post_init__(self):
        if self.episodes is None:
            self.episodes = [[[] for _ in range(self.S)] for _ in range(self.H)]
            self.snapshots = [[[] for _ in range(self.S)] for _ in range(self.H)]

    def append(self, g: int, h: int, s: int, policy: np.ndarray) -> None:
        eps = self.episodes[h][s]
        if eps and g <= eps[-1]:
            raise ValueError("episode indices must increase per (h, s)")
        eps.append(g)
        self.snapshots[h][s].append(np.array(policy, dtype=float))

    def visits_before(self, g: int, h: int, s: int) -> int:
        """N^{g,h}(s): visits to ``s`` at step ``h`` in episodes strictly before ``g``."""
        return int(np.searchsorted(self.episodes[h][s], g, side="left"))


class VLearner:
    """One player's V-learning state (0-indexed steps, ``V[H] = 0``)."""

    def __init__(self, H: int, S: int, A: int, G: int, c: float = 1.0,
                 delta: Optional[float] = None):
        self.H, self.S, self.A, self.G = H, S, A, G
        self.c = float(c)
        self.delta = 1.0 / (G * H) if delta is None else float(delta)
        self.V = np.zeros((H + 1, S))
        self.V[:H] = (H - np.arange(H))[:, None]
        self.V_tilde = np.zeros((H, S))
        self.counts = np.zeros((H, S), dtype=np.int64)
        self.loss_acc = np.zeros((H, S, A))
        self.mu = np.full((H, S, A), 1.0 / A)
        self.history = PolicyHistory(H, S)

    def schedules(self, n: int) -> tuple[float, float, float]:
        return schedules(n, self.H, self.A, self.S, self.G, self.c, self.delta)

    def act(self, h: int, s: int, rng: np.random.Generator) -> tuple[int, np.ndarray]:
        p = self.mu[h, s]
        return int(rng.choice(self.A, p=p)), p.copy()

    def update(self, g: int, h: int, s: int, a: int, r: float, s_next: int) -> None:
        H = self.H
        played = self.mu[h, s].copy()
        n = int(self.counts[h, s]) + 1
        self.counts[h, s] = n
        alpha, beta, gamma = self.schedules(n)
        v_next = self.V[h + 1, s_next]
        self.V_tilde[h, s] = (1 - alpha) * self.V_tilde[h, s] + alpha * (r + v_next + beta)
        self.V[h, s] = min(H - h, self.V_tilde[h, s])
        loss = np.zeros(self.A)
        loss[a] = (H - r - v_next) / H / (played[a] + gamma)
        if n == 1:
            self.loss_acc[h, s] = loss
        else:
            prev_alpha = step_size(n - 1, H)
            self.loss_acc[h, s] = loss + (prev_alpha * (1 - alpha) / alpha) * self.loss_acc[h, s]
        self.mu[h, s] = softmax(-gamma * self.loss_acc[h, s])
        self.history.append(g, h, s, played)


@dataclass
class ExecState:
    """Episode pointer carried by the output-policy executor across steps."""

    g: int


def start_output_episode(G: int, rng: np.random.Generator) -> ExecState:
    return ExecState(int(rng.integers(G)))


def output_act(history: PolicyHistory, h: int, s: int, exec_state: ExecState,
               rng: np.random.Generator, num_actions: int) -> int:
    """One step of the output policy; unvisited (h, s) falls back to uniform."""
    n = history.visits_before(exec_state.g, h, s)
    if n == 0:
        return int(rng.integers(num_actions))
    H = history.H
    i = int(rng.choice(n, p=alpha_weights(n, H)))
    exec_state.g = history.episodes[h][s][i]
    p = history.snapshots[h][s][i]
    return int(rng.choice(p.size, p=p))


def output_mixture(history: PolicyHistory, h: int, s: int, n: int, num_actions: int) -> np.ndarray:
    """Exact action distribution sum_i alpha_{n,i} mu^{g_i}(.|s); uniform when n = 0."""
    if n == 0:
        return np.full(num_actions, 1.0 / num_actions)
    w = alpha_weights(n, history.H)
    return w @ np.asarray(history.snapshots[h][s][:n])


def output_policy_marginal(history: PolicyHistory, G: int, num_actions: int) -> np.ndarray:
    """Per-(h, s) action marginal of the output rule with the episode index uniform on [G].

    This treats the resampled episode pointer as uniform at every step, which
    is exact at the first step and a Markov summary of the executor afterwards.
    """
    H, S = history.H, history.S
    out = np.empty((H, S, num_actions))
    for h in range(H):
        for s in range(S):
            eps = np.asarray(history.episodes[h][s], dtype=np.int64)
            snaps = history.snapshots[h][s]
            ns = np.searchsorted(eps, np.arange(G), side="left")
            weights = np.bincount(ns, minlength=len(eps) + 1) / G
            mix = np.full(num_actions, 1.0 / num_actions)
            acc = weights[0] * mix
            for n in range(1, len(eps) + 1):
                alpha = step_size(n, H)
                mix = alpha * snaps[n - 1] + (1 - alpha) * mix
                acc = acc + weights[n] * mix
            out[h, s] = acc
    return out


def output_marginal_curve(history: PolicyHistory, G: int, num_actions: int) -> np.ndarray:
    """Output-rule marginals after each prefix of episodes: row ``g - 1`` uses episodes ``< g``.

    Shape ``(G, H, S, num_actions)``; each row is :func:`output_policy_marginal`
    evaluated with budget ``g``.
    """
    H, S = history.H, history.S
    out = np.empty((G, H, S, num_actions))
    ranks = np.arange(1, G + 1)[:, None]
    for h in range(H):
        for s in range(S):
            eps = np.asarray(history.episodes[h][s], dtype=np.int64)
            snaps = history.snapshots[h][s]
            mixes = np.empty((len(eps) + 1, num_actions))
            mixes[0] = 1.0 / num_actions
            for n in range(1, len(eps) + 1):
                alpha = step_size(n, H)
                mixes[n] = alpha * snaps[n - 1] + (1 - alpha) * mixes[n - 1]
            ns = np.searchsorted(eps, np.arange(G), side="left")
            out[:, h, s] = np.cumsum(mixes[ns], axis=0) / ranks
    return out
