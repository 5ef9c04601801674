"""Token coordinate layouts and trajectory embeddings.

A :class:`Layout` is an ordered table of named, disjoint coordinate blocks
covering ``0..d-1``. Learned models and hand-built constructions both describe
their tokens this way, so extraction and staging never hard-code offsets.

Trajectory tokens alternate: a state token (state one-hot, ``v = 1``) followed
by an action/reward token, so step ``tau`` (0-indexed) occupies tokens
``2 tau + 1`` and ``2 tau + 2`` (1-indexed ``i``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

POS_BLOCKS = ("pos_g", "pos_h", "pos_t", "pos_eh", "pos_v", "pos_i", "pos_i2", "pos_one")
MODES = ("centralized", "decentralized_max", "decentralized_min")


class Layout:
    def __init__(self, blocks: Sequence[tuple[str, int]]):
        self.blocks: list[tuple[str, int]] = []
        self._off: dict[str, tuple[int, int]] = {}
        d = 0
        for name, size in blocks:
            if name in self._off:
                raise ValueError(f"duplicate block {name!r}")
            if size < 0:
                raise ValueError(f"negative size for {name!r}")
            self._off[name] = (d, size)
            self.blocks.append((name, int(size)))
            d += size
        self.d = d

    def __contains__(self, name: str) -> bool:
        return name in self._off

    def sl(self, name: str) -> slice:
        start, size = self._off[name]
        return slice(start, start + size)

    def span(self, name: str) -> tuple[int, int]:
        return self._off[name]

    def idx(self, name: str, k: int = 0) -> int:
        start, size = self._off[name]
        if not 0 <= k < size:
            raise IndexError(f"{name}[{k}] out of range")
        return start + k

    def to_dict(self) -> list:
        return [[n, s] for n, s in self.blocks]


def positional_blocks(H: int) -> list[tuple[str, int]]:
    return [("pos_g", 1), ("pos_h", 1), ("pos_t", 1), ("pos_eh", H), ("pos_v", 1),
            ("pos_i", 1), ("pos_i2", 1), ("pos_one", 1)]


@dataclass(frozen=True)
class EmbeddingSpec:
    """Structured one-hot embedding for one model role.

    With ``normalize_pos`` the positional counters are divided by their
    maxima (``g/G``, ``h/H``, ``t/T``, ``i/2T`` and its square) so that learned
    weights see O(1) inputs; raw counters are used otherwise.
    """

    mode: str
    H: int
    S: int
    A: int
    B: int
    G: int
    scratch: int = 8
    normalize_pos: bool = True
    layout: Layout = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown embedding mode {self.mode!r}")
        if self.mode == "centralized":
            part_a = [("act_a", self.A), ("act_b", self.B), ("reward", 1)]
        else:
            part_a = [("act", self.num_outputs), ("reward", 1)]
        blocks = part_a + [("state", self.S), ("out", self.num_outputs),
                           ("scratch", self.scratch)] + positional_blocks(self.H)
        object.__setattr__(self, "layout", Layout(blocks))

    @property
    def num_outputs(self) -> int:
        if self.mode == "centralized":
            return self.A * self.B
        return self.A if self.mode == "decentralized_max" else self.B

    @property
    def d(self) -> int:
        return self.layout.d

    @property
    def T(self) -> int:
        return self.G * self.H

    def to_dict(self) -> dict:
        return {"mode": self.mode, "H": self.H, "S": self.S, "A": self.A, "B": self.B,
                "G": self.G, "scratch": self.scratch, "normalize_pos": self.normalize_pos}

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingSpec":
        return cls(d["mode"], int(d["H"]), int(d["S"]), int(d["A"]), int(d["B"]), int(d["G"]),
                   int(d["scratch"]), bool(d["normalize_pos"]))

    # -- positional features --------------------------------------------------------------
    def write_pos(self, X: np.ndarray, tau: np.ndarray, i: np.ndarray, is_state: np.ndarray) -> None:
        """Fill the positional block of rows ``X`` for 0-indexed step ``tau`` and token index ``i``."""
        L = self.layout
        g = tau // self.H + 1
        h = tau % self.H + 1
        t = tau + 1
        i = np.asarray(i, dtype=float)
        if self.normalize_pos:
            scale_i = 2.0 * self.T
            vals = (g / self.G, h / self.H, t / self.T, i / scale_i, (i / scale_i) ** 2)
        else:
            vals = (g, h, t, i, i ** 2)
        X[..., L.idx("pos_g")] = vals[0]
        X[..., L.idx("pos_h")] = vals[1]
        X[..., L.idx("pos_t")] = vals[2]
        X[..., L.idx("pos_i")] = vals[3]
        X[..., L.idx("pos_i2")] = vals[4]
        X[..., L.idx("pos_v")] = is_state
        X[..., L.idx("pos_one")] = 1.0
        eh = L.span("pos_eh")[0] + (h - 1)
        if X.ndim == 1:
            X[int(eh)] = 1.0
        else:
            eh = np.broadcast_to(np.asarray(eh, dtype=np.int64), X.shape[:-1])
            np.put_along_axis(X, eh[..., None], 1.0, axis=-1)


def view_arrays(steps, mode: str) -> np.ndarray:
    """Stack ``(s, action[, action_b], reward)`` rows into a float array."""
    width = 4 if mode == "centralized" else 3
    arr = np.asarray([tuple(x) for x in steps], dtype=float).reshape(-1, width)
    return arr


def embed_steps(spec: EmbeddingSpec, steps: np.ndarray, start_tau: int = 0) -> np.ndarray:
    """Tokens for full steps ``steps`` (rows from :func:`view_arrays`): ``2 n`` rows."""
    L = spec.layout
    n = steps.shape[0]
    X = np.zeros((2 * n, spec.d))
    tau = start_tau + np.arange(n)
    rows_s = np.arange(0, 2 * n, 2)
    rows_a = rows_s + 1
    s = steps[:, 0].astype(int)
    X[rows_s, L.span("state")[0] + s] = 1.0
    if spec.mode == "centralized":
        X[rows_a, L.span("act_a")[0] + steps[:, 1].astype(int)] = 1.0
        X[rows_a, L.span("act_b")[0] + steps[:, 2].astype(int)] = 1.0
    else:
        X[rows_a, L.span("act")[0] + steps[:, 1].astype(int)] = 1.0
    X[rows_a, L.idx("reward")] = steps[:, -1]
    both = np.repeat(tau, 2)
    idx = 2 * start_tau + np.arange(1, 2 * n + 1)
    spec.write_pos(X, both, idx, np.tile([1.0, 0.0], n))
    return X


def state_tokens(spec: EmbeddingSpec, states: np.ndarray, tau: int) -> np.ndarray:
    """Query tokens for step ``tau`` at each state in ``states`` (token index ``2 tau + 1``)."""
    L = spec.layout
    states = np.asarray(states, dtype=int)
    X = np.zeros((states.size, spec.d))
    X[np.arange(states.size), L.span("state")[0] + states] = 1.0
    spec.write_pos(X, np.full(states.size, tau), np.full(states.size, 2 * tau + 1),
                   np.ones(states.size))
    return X


def embed(spec: EmbeddingSpec, steps, current_state: int) -> np.ndarray:
    """``2t - 1`` tokens: ``t - 1`` completed steps plus the current state."""
    arr = view_arrays(steps, spec.mode)
    prefix = embed_steps(spec, arr)
    query = state_tokens(spec, [current_state], arr.shape[0])
    return np.concatenate([prefix, query], axis=0)
