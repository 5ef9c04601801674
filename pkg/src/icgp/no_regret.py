"""Multiplicative weights (CCE solver) and EXP3."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class MwuResult:
    joint_policy: np.ndarray  # (..., A, B)
    per_round_marginals: Optional[list[tuple[np.ndarray, np.ndarray]]] = None


def max_player_losses(Q_upper: np.ndarray, H: float) -> np.ndarray:
    return (H - np.asarray(Q_upper, dtype=float)) / H


def min_player_losses(Q_lower: np.ndarray, H: float) -> np.ndarray:
    # The min-player pays Q, so its normalized loss grows with Q.
    return np.asarray(Q_lower, dtype=float) / H


def mwu_cce(Q_upper: np.ndarray, Q_lower: np.ndarray, H: float, N: int,
            keep_marginals: bool = False) -> MwuResult:
    """Run ``N`` rounds of virtual Hedge self-play on the optimistic payoffs.

    The max-player is fed losses ``(H - Q_upper) / H``, the min-player
    ``Q_lower / H``. Leading batch dimensions are solved independently.
    Returns the average of the per-round product policies.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    Lu = max_player_losses(Q_upper, H)
    Ll = min_player_losses(Q_lower, H)
    A, B = Lu.shape[-2], Lu.shape[-1]
    eta_a = np.sqrt(np.log(A) / N)
    eta_b = np.sqrt(np.log(B) / N)
    O_plus = np.zeros(Lu.shape[:-1])
    O_minus = np.zeros(Lu.shape[:-2] + (B,))
    total = np.zeros(Lu.shape)
    kept = [] if keep_marginals else None
    for _ in range(N):
        mu = softmax(-eta_a * O_plus)
        nu = softmax(-eta_b * O_minus)
        total += mu[..., :, None] * nu[..., None, :]
        if kept is not None:
            kept.append((mu, nu))
        O_plus += np.einsum("...ab,...b->...a", Lu, nu)
        O_minus += np.einsum("...a,...ab->...b", mu, Ll)
    return MwuResult(total / N, kept)


def cce_epsilon(A: int, B: int, H: float, N: int) -> float:
    """Approximation level guaranteed for ``N`` rounds: H sqrt(ln(A+B)/N)."""
    return H * np.sqrt(np.log(A + B) / N)


def cce_gaps(Q_upper: np.ndarray, Q_lower: np.ndarray, joint: np.ndarray) -> tuple[float, float]:
    """Best fixed-deviation gains for each side against a joint policy."""
    joint = np.asarray(joint, dtype=float)
    nu_marg = joint.sum(axis=0)
    mu_marg = joint.sum(axis=1)
    max_side = np.max(Q_upper @ nu_marg) - np.sum(joint * Q_upper)
    min_side = np.sum(joint * Q_lower) - np.min(mu_marg @ Q_lower)
    return float(max_side), float(min_side)


def exp3_default_eta(num_actions: int, horizon: int) -> float:
    return float(np.sqrt(2.0 * np.log(num_actions) / (num_actions * horizon)))


@dataclass
class Exp3Learner:
    """Exponential weights over importance-weighted loss estimates.

    Rewards are in [0, 1] and converted to losses ``1 - r``; the min-player
    is fed ``1 - r`` as its reward.
    """

    num_actions: int
    eta: float
    cum_loss: np.ndarray = field(default=None)
    rounds: int = 0

    def __post_init__(self):
        if self.cum_loss is None:
            self.cum_loss = np.zeros(self.num_actions)

    def probabilities(self) -> np.ndarray:
        return softmax(-self.eta * self.cum_loss)

    def act(self, rng: np.random.Generator) -> tuple[int, np.ndarray]:
        p = self.probabilities()
        return int(rng.choice(self.num_actions, p=p)), p

    def update(self, action: int, reward: float, prob_of_action: float) -> None:
        if prob_of_action <= 0:
            raise ValueError("prob_of_action must be positive")
        self.cum_loss[action] += (1.0 - reward) / prob_of_action
        self.rounds += 1


def exp3_act(learner: Exp3Learner, rng: np.random.Generator) -> tuple[int, np.ndarray]:
    return learner.act(rng)


def exp3_update(learner: Exp3Learner, action: int, reward: float, prob_of_action: float) -> None:
    learner.update(action, reward, prob_of_action)
