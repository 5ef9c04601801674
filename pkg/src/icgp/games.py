"""Finite-horizon two-player zero-sum Markov games and episode rollouts.

States and actions are 0-indexed. The max-player picks ``a`` in ``range(A)``,
the min-player ``b`` in ``range(B)``; rewards are paid to the max-player.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class MarkovGame:
    """Game with deterministic rewards.

    ``transition[h, s, a, b]`` is the next-state distribution after step ``h``
    (the row at ``h = H - 1`` is never used by rollouts). ``reward[h, s, a, b]``
    lies in [0, 1].
    """

    transition: np.ndarray  # (H, S, A, B, S)
    reward: np.ndarray  # (H, S, A, B)
    initial_state: int = 0

    @property
    def H(self) -> int:
        return self.reward.shape[0]

    @property
    def S(self) -> int:
        return self.reward.shape[1]

    @property
    def A(self) -> int:
        return self.reward.shape[2]

    @property
    def B(self) -> int:
        return self.reward.shape[3]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.H, self.S, self.A, self.B


@dataclass(frozen=True)
class EpisodeStep:
    g: int
    h: int
    s: int
    a: int
    b: int
    r: float


def validate_game(game: MarkovGame) -> None:
    """Raise ValueError unless ``game`` satisfies the model invariants."""
    H, S, A, B = game.dims
    if game.transition.shape != (H, S, A, B, S):
        raise ValueError(f"transition shape {game.transition.shape} != {(H, S, A, B, S)}")
    if np.any(game.transition < 0):
        raise ValueError("negative transition probability")
    if np.max(np.abs(game.transition.sum(axis=-1) - 1.0)) > 1e-12:
        raise ValueError("transition rows must sum to 1")
    if np.any(game.reward < 0) or np.any(game.reward > 1):
        raise ValueError("rewards must lie in [0, 1]")
    if not 0 <= game.initial_state < S:
        raise ValueError("initial_state out of range")


def truncated_normal_01(rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw N(0, 1) samples conditioned on [0, 1] by rejection."""
    out = np.empty(size)
    filled = 0
    while filled < size:
        need = size - filled
        draw = rng.standard_normal(max(2 * need, 8))
        keep = draw[(draw >= 0.0) & (draw <= 1.0)][:need]
        out[filled:filled + keep.size] = keep
        filled += keep.size
    return out


def _check_dims(**dims: int) -> None:
    for name, value in dims.items():
        if int(value) < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")


def sample_markov_game(A: int, B: int, S: int, H: int, seed: int) -> MarkovGame:
    """Cyclic-transition game: equal action indices move s -> (s + 1) mod S."""
    _check_dims(A=A, B=B, S=S, H=H)
    rng = np.random.default_rng(seed)
    reward = truncated_normal_01(rng, H * S * A * B).reshape(H, S, A, B)
    transition = np.zeros((H, S, A, B, S))
    for s in range(S):
        transition[:, s, :, :, s] = 1.0
        for k in range(min(A, B)):
            transition[:, s, k, k, s] = 0.0
            transition[:, s, k, k, (s + 1) % S] = 1.0
    return MarkovGame(transition=transition, reward=reward, initial_state=0)


def sample_matrix_game(A: int, B: int, seed: int) -> MarkovGame:
    """Single-state, single-step game with truncated-Gaussian payoffs."""
    return sample_markov_game(A, B, 1, 1, seed)


def run_episode(
    game: MarkovGame,
    act: Callable[[int, int], tuple[int, int]],
    rng: np.random.Generator,
    g: int = 0,
) -> list[EpisodeStep]:
    """Roll one episode; ``act(h, s)`` returns the action pair to play."""
    steps = []
    s = game.initial_state
    for h in range(game.H):
        a, b = act(h, s)
        if not (0 <= a < game.A and 0 <= b < game.B):
            raise ValueError(f"action pair ({a}, {b}) out of range at h={h}, s={s}")
        r = float(game.reward[h, s, a, b])
        steps.append(EpisodeStep(g, h, s, int(a), int(b), r))
        s = step_state(game, h, s, a, b, rng)
    return steps


def step_state(game: MarkovGame, h: int, s: int, a: int, b: int,
               rng: np.random.Generator) -> int:
    """Sample the state following ``(h, s, a, b)``."""
    row = game.transition[h, s, a, b]
    nz = np.flatnonzero(row)
    if nz.size == 1:
        return int(nz[0])
    return int(rng.choice(game.S, p=row))
