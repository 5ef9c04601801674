"""Pretraining data: context-algorithm rollouts with per-state action augmentation.

At every time step ``t`` the context algorithm's current policy is queried at
*every* state and one action (pair) is sampled per state without touching the
environment. Records serialize to JSON lines.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .games import EpisodeStep, MarkovGame, sample_markov_game, step_state
from .no_regret import Exp3Learner, exp3_default_eta
from .v_learning import VLearner
from .vi_ulcb import ViUlcb

CONTEXT_ALGORITHMS = ("exp3", "v_learning", "vi_ulcb")

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, namespace: int, index: int) -> int:
    """Independent 64-bit stream seed for item ``index`` in ``namespace``."""
    return splitmix64(splitmix64(splitmix64(seed & _MASK64) ^ namespace) ^ index)


PRETRAIN_NS = 1
INFERENCE_NS = 2


@dataclass(frozen=True)
class GameFamily:
    A: int = 5
    B: int = 5
    S: int = 1
    H: int = 1
    G: int = 3000

    @property
    def T(self) -> int:
        return self.G * self.H

    def sample(self, seed: int) -> MarkovGame:
        return sample_markov_game(self.A, self.B, self.S, self.H, seed)


@dataclass(frozen=True)
class ContextParams:
    """Constants of the context algorithms; ``None`` means the documented default."""

    c_vi: float = 1.0
    c_v: float = 1.0
    delta: Optional[float] = None
    n_mwu: Optional[int] = None
    eta: Optional[float] = None


@dataclass
class TrajectoryRecord:
    game_seed: int
    dims: tuple[int, int, int, int]  # (H, S, A, B)
    steps: list[EpisodeStep]
    aug: list[tuple[int, int, int, int]]  # (t, s, a, b), t 0-indexed

    def __eq__(self, other):
        return (isinstance(other, TrajectoryRecord) and self.game_seed == other.game_seed
                and tuple(self.dims) == tuple(other.dims) and self.steps == other.steps
                and [tuple(x) for x in self.aug] == [tuple(x) for x in other.aug])

    def to_json(self, round2: bool = False) -> str:
        H, S, A, B = self.dims
        rnd = (lambda r: round(r, 2)) if round2 else (lambda r: r)
        obj = {
            "game_seed": self.game_seed,
            "dims": {"H": H, "S": S, "A": A, "B": B},
            "steps": [{"g": st.g, "h": st.h, "s": st.s, "a": st.a, "b": st.b, "r": rnd(st.r)}
                      for st in self.steps],
            "aug": [{"t": t, "s": s, "a": a, "b": b} for t, s, a, b in self.aug],
        }
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "TrajectoryRecord":
        obj = json.loads(line)
        d = obj["dims"]
        steps = [EpisodeStep(int(x["g"]), int(x["h"]), int(x["s"]), int(x["a"]), int(x["b"]),
                             float(x["r"])) for x in obj["steps"]]
        aug = [(int(x["t"]), int(x["s"]), int(x["a"]), int(x["b"])) for x in obj["aug"]]
        return cls(int(obj["game_seed"]), (int(d["H"]), int(d["S"]), int(d["A"]), int(d["B"])),
                   steps, aug)


@dataclass
class DecentralizedView:
    """One player's observations: own actions and own rewards only.

    ``steps`` rows are ``(s, action, reward)`` with the min-player's reward
    stored as ``1 - r``; ``aug`` rows are ``(t, s, action)``.
    """

    player: str
    dims: tuple[int, int, int, int]
    steps: list[tuple[int, int, float]]
    aug: list[tuple[int, int, int]]

    @property
    def num_actions(self) -> int:
        return self.dims[2] if self.player == "max" else self.dims[3]


def split_decentralized(record: TrajectoryRecord) -> tuple[DecentralizedView, DecentralizedView]:
    mx = DecentralizedView("max", record.dims, [(st.s, st.a, st.r) for st in record.steps],
                           [(t, s, a) for t, s, a, _ in record.aug])
    mn = DecentralizedView("min", record.dims, [(st.s, st.b, 1.0 - st.r) for st in record.steps],
                           [(t, s, b) for t, s, _, b in record.aug])
    return mx, mn


# --- context algorithm drivers -------------------------------------------------------------

class _Decoupled:
    """Two independent learners; policies are per player."""

    joint = False

    def __init__(self, tag: str, fam: GameFamily, params: ContextParams):
        H, S, A, B, G = fam.H, fam.S, fam.A, fam.B, fam.G
        self.tag = tag
        if tag == "exp3":
            if H != 1 or S != 1:
                raise ValueError("exp3 context requires a single-state, single-step game")
            T = fam.T
            self.players = [Exp3Learner(A, params.eta or exp3_default_eta(A, T)),
                            Exp3Learner(B, params.eta or exp3_default_eta(B, T))]
        else:
            self.players = [VLearner(H, S, A, G, params.c_v, params.delta),
                            VLearner(H, S, B, G, params.c_v, params.delta)]

    def begin_episode(self, g: int) -> None:
        pass

    def policies(self, h: int, s: int) -> tuple[np.ndarray, np.ndarray]:
        if self.tag == "exp3":
            return self.players[0].probabilities(), self.players[1].probabilities()
        return self.players[0].mu[h, s].copy(), self.players[1].mu[h, s].copy()

    def update(self, g, h, s, a, b, r, s_next, pa, pb) -> None:
        if self.tag == "exp3":
            self.players[0].update(a, r, pa[a])
            self.players[1].update(b, 1.0 - r, pb[b])
        else:
            self.players[0].update(g, h, s, a, r, s_next)
            self.players[1].update(g, h, s, b, 1.0 - r, s_next)


class _Centralized:
    joint = True

    def __init__(self, fam: GameFamily, params: ContextParams):
        self.alg = ViUlcb(fam.H, fam.S, fam.A, fam.B, fam.G, params.c_vi, params.delta,
                          params.n_mwu)

    def begin_episode(self, g: int) -> None:
        self.alg.plan()

    def policies(self, h: int, s: int) -> np.ndarray:
        return self.alg.policy[h, s]

    def update(self, g, h, s, a, b, r, s_next, *_):
        self.alg.update(h, s, a, b, r, s_next)


def make_context(tag: str, fam: GameFamily, params: ContextParams):
    if tag not in CONTEXT_ALGORITHMS:
        raise ValueError(f"unknown context algorithm {tag!r}")
    if tag == "vi_ulcb":
        return _Centralized(fam, params)
    return _Decoupled(tag, fam, params)


def _sample_pair(policy, rng: np.random.Generator, joint: bool, B: int) -> tuple[int, int]:
    if joint:
        p = policy.ravel()
        return divmod(int(rng.choice(p.size, p=p / p.sum())), B)
    pa, pb = policy
    return int(rng.choice(pa.size, p=pa)), int(rng.choice(pb.size, p=pb))


@dataclass
class ContextRun:
    """Everything produced by running a context algorithm on one game."""

    record: TrajectoryRecord
    game: MarkovGame
    # Decoupled: (T, S, A) and (T, S, B) per-time policies; centralized: (G, H, S, A, B).
    policies: dict = field(default_factory=dict)
    context: object = None


def run_context(game: MarkovGame, game_seed: int, tag: str, fam: GameFamily,
                params: ContextParams, rng: np.random.Generator,
                keep_policies: bool = False) -> ContextRun:
    """Run ``tag`` on ``game`` for ``fam.G`` episodes, recording base and augmented data."""
    ctx = make_context(tag, fam, params)
    H, S, A, B = game.dims
    steps, aug = [], []
    pol_max = np.empty((fam.T, S, A)) if keep_policies and not ctx.joint else None
    pol_min = np.empty((fam.T, S, B)) if keep_policies and not ctx.joint else None
    t = 0
    for g in range(fam.G):
        ctx.begin_episode(g)
        s = game.initial_state
        for h in range(H):
            per_state = [ctx.policies(h, x) for x in range(S)]
            for x in range(S):
                a_x, b_x = _sample_pair(per_state[x], rng, ctx.joint, B)
                aug.append((t, x, a_x, b_x))
            if pol_max is not None:
                for x in range(S):
                    pol_max[t, x], pol_min[t, x] = per_state[x]
            a, b = _sample_pair(per_state[s], rng, ctx.joint, B)
            r = float(game.reward[h, s, a, b])
            s_next = step_state(game, h, s, a, b, rng)
            steps.append(EpisodeStep(g, h, s, a, b, r))
            if ctx.joint:
                ctx.update(g, h, s, a, b, r, s_next)
            else:
                pa, pb = per_state[s]
                ctx.update(g, h, s, a, b, r, s_next, pa, pb)
            s = s_next
            t += 1
    policies = {}
    if keep_policies:
        if ctx.joint:
            policies["joint"] = np.asarray(ctx.alg.policy_history)
        else:
            policies["max"], policies["min"] = pol_max, pol_min
    return ContextRun(TrajectoryRecord(game_seed, game.dims, steps, aug), game, policies, ctx)


def algorithm_rng(game_seed: int) -> np.random.Generator:
    return np.random.default_rng(splitmix64(game_seed ^ 0xA5A5A5A5))


def collect_pretraining(fam: GameFamily, context: str, N: int, seed: int,
                        params: ContextParams = ContextParams(),
                        namespace: int = PRETRAIN_NS) -> list[TrajectoryRecord]:
    """Sample ``N`` games and record one augmented context-algorithm trajectory on each."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if context not in CONTEXT_ALGORITHMS:
        raise ValueError(f"unknown context algorithm {context!r}")
    records = []
    for i in range(N):
        gs = derive_seed(seed, namespace, i)
        game = fam.sample(gs)
        records.append(run_context(game, gs, context, fam, params, algorithm_rng(gs)).record)
    return records


def write_jsonl(records: Iterable[TrajectoryRecord], path, round2: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json(round2))
            fh.write("\n")


def read_jsonl(path) -> list[TrajectoryRecord]:
    records = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(TrajectoryRecord.from_json(line))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: malformed record on line {lineno}: {exc}") from exc
    return records
