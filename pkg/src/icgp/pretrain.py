"""Maximum-likelihood pretraining and frozen in-context inference.

Training examples are windows of ``W`` consecutive trajectory tokens starting
at a state token. Every state token in a window is a prediction point: its
target is the augmented action sampled at that time step. When the game has
more than one state, each prediction point is expanded into ``S`` side query
tokens (one per state) that see the same prefix, so the model is trained on
every state at every step, not only the visited one.
"""
from __future__ import annotations

import csv
import io
import struct
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import TrajectoryRecord, split_decentralized
from .games import MarkovGame, step_state
from .layout import EmbeddingSpec, embed_steps, state_tokens, view_arrays
from .transformer import (Layer, MlpLayer, TransformerParams, apply_head, extract,
                          project_simplex, softmax, tf_backward, tf_forward)

OPTIMIZERS = ("adaptive", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 5e-4
    optimizer: str = "adaptive"
    seed: int = 0
    head_mode: str = "softmax"
    layers: int = 2
    heads: int = 4
    hidden: int = 32
    scratch: int = 8
    window: Optional[int] = None  # tokens; None keeps whole trajectories
    init_scale: float = 1.0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "layers", "heads", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.head_mode != "softmax":
            raise ValueError("training requires the softmax head")
        if self.window is not None and (self.window < 2 or self.window % 2):
            raise ValueError("window must be a positive even token count")


@dataclass
class Batch:
    """Token windows plus prediction targets.

    Main tokens ``X`` are ``(b, n, d)``. Either ``query_pos`` lists the main
    positions (0-indexed) whose outputs are scored, or side tokens ``Y``
    ``(b, k, d)`` with 1-indexed positions ``side_pos`` are scored.
    ``targets`` has shape ``(b, q)``.
    """

    X: np.ndarray
    targets: np.ndarray
    query_pos: Optional[np.ndarray] = None
    Y: Optional[np.ndarray] = None
    side_pos: Optional[np.ndarray] = None

    def __post_init__(self):
        if (self.Y is None) == (self.query_pos is None):
            raise ValueError("exactly one of query_pos and Y must be given")


@dataclass
class LossReport:
    epoch_nll: list[float] = field(default_factory=list)
    initial_nll: float = float("nan")
    epoch_seconds: list[float] = field(default_factory=list)
    grad_check: Optional[dict] = None

    @property
    def final_nll(self) -> float:
        return self.epoch_nll[-1] if self.epoch_nll else self.initial_nll

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "mean_nll"])
        w.writerow([0, repr(self.initial_nll)])
        for k, nll in enumerate(self.epoch_nll, start=1):
            w.writerow([k, repr(nll)])
        return buf.getvalue()


# --- loss and gradient ----------------------------------------------------------------------

def _forward_logits(params: TransformerParams, batch: Batch, caches=None):
    if batch.Y is None:
        out = tf_forward(params, batch.X, caches=caches)
        return extract(params, out[:, batch.query_pos, :])
    _, out_y = tf_forward(params, batch.X, batch.Y, batch.side_pos, caches=caches)
    return extract(params, out_y)


def _nll_from_probs(p: np.ndarray, targets: np.ndarray) -> float:
    picked = np.take_along_axis(p, targets[..., None], axis=-1)[..., 0]
    return float(-np.mean(np.log(picked)))


def mle_loss(params: TransformerParams, batch: Batch) -> float:
    """Mean negative log-likelihood of the targets under the model's head."""
    if params.head_mode == "simplex":
        raise ValueError("the simplex head is not differentiable; train with softmax")
    z = _forward_logits(params, batch)
    return _nll_from_probs(apply_head(z, params.head_mode, params.zeta), batch.targets)


def grad(params: TransformerParams, batch: Batch) -> tuple[float, list[np.ndarray]]:
    """Loss and its exact gradient, aligned with ``params.arrays()``."""
    if params.head_mode != "softmax":
        raise ValueError("gradients are defined for the softmax head only")
    caches: list = []
    z = _forward_logits(params, batch, caches)
    p = softmax(z)
    loss = _nll_from_probs(p, batch.targets)
    dz = p.copy()
    np.put_along_axis(dz, batch.targets[..., None], np.take_along_axis(dz, batch.targets[..., None], -1) - 1.0, axis=-1)
    dz /= batch.targets.size
    start, length = params.extraction
    if batch.Y is None:
        dX = np.zeros_like(batch.X)
        dX[:, batch.query_pos, start:start + length] = dz
        dY = None
    else:
        dX = np.zeros_like(batch.X)
        dY = np.zeros_like(batch.Y)
        dY[..., start:start + length] = dz
    grads = tf_backward(params, caches, dX, dY)
    return loss, grads


def _kink_signature(params: TransformerParams, batch: Batch) -> list[np.ndarray]:
    caches: list = []
    _forward_logits(params, batch, caches)
    sig = []
    for c, layer in zip(caches, params.layers):
        for key in ("s_mm", "s_sm", "s_self"):
            if key in c:
                sig.append(c[key] > 0)
        if layer.mlp is not None and layer.mlp.activation == "relu":
            sig += [Z > 0 for _, Z, _ in c["mlp"]]
    return sig


def gradient_check(params: TransformerParams, batch: Batch, probes: int = 200, eps: float = 1e-5,
                   seed: int = 0, max_redraws: int = 1000) -> dict:
    """Compare analytic gradients with central differences on random coordinates.

    A probe whose +-eps perturbation flips any ReLU gate (attention score or
    MLP unit) straddles a kink where the loss is not differentiable; such
    probes are redrawn and counted.
    """
    _, grads = grad(params, batch)
    arrays = params.arrays()
    sizes = np.array([a.size for a in arrays])
    rng = np.random.default_rng(seed)
    worst, skipped, done = 0.0, 0, 0
    while done < probes:
        k = int(rng.choice(len(arrays), p=sizes / sizes.sum()))
        flat = int(rng.integers(arrays[k].size))
        idx = np.unravel_index(flat, arrays[k].shape)
        old = arrays[k][idx]
        arrays[k][idx] = old + eps
        lp, sp = mle_loss(params, batch), _kink_signature(params, batch)
        arrays[k][idx] = old - eps
        lm, sm = mle_loss(params, batch), _kink_signature(params, batch)
        arrays[k][idx] = old
        if any(not np.array_equal(a, b) for a, b in zip(sp, sm)):
            skipped += 1
            if skipped > max_redraws:
                raise RuntimeError("too many probes straddle ReLU kinks")
            continue
        fd = (lp - lm) / (2 * eps)
        an = float(grads[k][idx])
        rel = abs(fd - an) / max(abs(fd) + abs(an), 1e-8)
        worst = max(worst, rel)
        done += 1
    return {"max_rel_error": worst, "probes": probes, "kink_redraws": skipped, "eps": eps}


# --- parameters ----------------------------------------------------------------------------

def init_params(spec: EmbeddingSpec, cfg: TrainConfig, rng: np.random.Generator) -> TransformerParams:
    d, M, dh = spec.d, cfg.heads, cfg.hidden
    s = cfg.init_scale
    layers = []
    for _ in range(cfg.layers):
        Q = rng.normal(0, s / np.sqrt(d), size=(M, d, d))
        K = rng.normal(0, s / np.sqrt(d), size=(M, d, d))
        V = rng.normal(0, 0.5 * s / np.sqrt(d), size=(M, d, d))
        W1 = rng.normal(0, s / np.sqrt(d), size=(dh, d))
        W2 = rng.normal(0, 0.5 * s / np.sqrt(dh), size=(d, dh))
        layers.append(Layer(Q, K, V, MlpLayer(W1, W2, "relu")))
    return TransformerParams(layers, d, spec.layout.span("out"), head_mode=cfg.head_mode,
                             spec={"embedding": spec.to_dict()})


class Adam:
    def __init__(self, arrays: Sequence[np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.k = 0

    def step(self, arrays, grads):
        self.k += 1
        c1 = 1 - self.b1 ** self.k
        c2 = 1 - self.b2 ** self.k
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Sgd:
    def __init__(self, arrays, lr: float):
        self.lr = lr

    def step(self, arrays, grads):
        for a, g in zip(arrays, grads):
            a -= self.lr * g


# --- training data --------------------------------------------------------------------------

def role_steps(record: TrajectoryRecord, mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Step rows and augmented targets ``(T, S)`` for one model role."""
    H, S, A, B = record.dims
    T = len(record.steps)
    targets = np.zeros((T, S), dtype=np.int64)
    if mode == "centralized":
        rows = [(st.s, st.a, st.b, st.r) for st in record.steps]
        for t, s, a, b in record.aug:
            targets[t, s] = a * B + b
    else:
        mx, mn = split_decentralized(record)
        view = mx if mode == "decentralized_max" else mn
        rows = view.steps
        for t, s, act in view.aug:
            targets[t, s] = act
    return view_arrays(rows, mode), targets


@dataclass
class WindowData:
    spec: EmbeddingSpec
    tokens: list[np.ndarray]      # per trajectory (2T, d)
    targets: list[np.ndarray]     # per trajectory (T, S)
    windows: np.ndarray           # (num_windows, 2): trajectory index, start token (even)
    length: int

    def batch(self, idx: np.ndarray) -> Batch:
        spec, W = self.spec, self.length
        X = np.stack([self.tokens[i][s:s + W] for i, s in self.windows[idx]])
        steps = (self.windows[idx, 1] // 2)[:, None] + np.arange(W // 2)[None, :]
        tg = np.stack([self.targets[i][st] for (i, _), st in zip(self.windows[idx], steps)])
        S = spec.S
        if S == 1:
            return Batch(X, tg[..., 0], query_pos=np.arange(0, W, 2))
        Y = np.stack([_side_tokens(spec, st) for st in steps])
        side_pos = np.repeat(np.arange(1, W, 2), S).astype(float)
        return Batch(X, tg.reshape(len(idx), -1), Y=Y, side_pos=side_pos)


def _side_tokens(spec: EmbeddingSpec, steps: np.ndarray) -> np.ndarray:
    return np.concatenate([state_tokens(spec, np.arange(spec.S), int(t)) for t in steps])


def build_windows(records: Sequence[TrajectoryRecord], spec: EmbeddingSpec,
                  window: Optional[int]) -> WindowData:
    if not records:
        raise ValueError("empty dataset")
    tokens, targets, wins = [], [], []
    full = 2 * len(records[0].steps)
    W = full if window is None else min(window, full)
    for k, rec in enumerate(records):
        if tuple(rec.dims) != (spec.H, spec.S, spec.A, spec.B):
            raise ValueError("record dimensions do not match the embedding")
        rows, tg = role_steps(rec, spec.mode)
        X = embed_steps(spec, rows)
        if X.shape[0] != full:
            raise ValueError("all trajectories must have the same length")
        tokens.append(X)
        targets.append(tg)
        starts = list(range(0, full - W + 1, W))
        if starts[-1] != full - W:
            starts.append(full - W)
        wins += [(k, s) for s in starts]
    return WindowData(spec, tokens, targets, np.asarray(wins, dtype=np.int64), W)


def _mean_nll(params, data: WindowData, batch_size: int) -> float:
    total, count = 0.0, 0
    for lo in range(0, len(data.windows), batch_size):
        b = data.batch(np.arange(lo, min(lo + batch_size, len(data.windows))))
        total += mle_loss(params, b) * b.targets.size
        count += b.targets.size
    return total / count


def train(cfg: TrainConfig, records: Sequence[TrajectoryRecord], mode: str,
          G: Optional[int] = None, params: Optional[TransformerParams] = None,
          log=None) -> tuple[TransformerParams, LossReport]:
    """Fit one model role by mini-batch MLE over all windows of all trajectories."""
    if not records:
        raise ValueError("empty dataset")
    H, S, A, B = records[0].dims
    G = G or len(records[0].steps) // H
    spec = EmbeddingSpec(mode, H, S, A, B, G, scratch=cfg.scratch)
    data = build_windows(records, spec, cfg.window)
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(spec, cfg, rng)
    params.spec["window"] = data.length
    arrays = params.arrays()
    opt = Adam(arrays, cfg.lr) if cfg.optimizer == "adaptive" else Sgd(arrays, cfg.lr)
    report = LossReport(initial_nll=_mean_nll(params, data, cfg.batch_size))
    n = len(data.windows)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            b = data.batch(order[lo:lo + cfg.batch_size])
            loss, grads = grad(params, b)
            opt.step(arrays, grads)
            total += loss * b.targets.size
            count += b.targets.size
        report.epoch_nll.append(total / count)
        report.epoch_seconds.append(time.perf_counter() - t0)
        if log is not None:
            log(epoch + 1, report.epoch_nll[-1])
    return params, report


# --- checkpoints ---------------------------------------------------------------------------

MAGIC = b"ICGPCKPT"
CKPT_VERSION = 1


def save_checkpoint(params: TransformerParams, path) -> None:
    """Binary checkpoint: magic, version, JSON header length, JSON header, float64 data."""
    header = {
        "version": CKPT_VERSION, "d": params.d, "extraction": list(params.extraction),
        "head_mode": params.head_mode, "zeta": params.zeta, "clip_radius": params.clip_radius,
        "spec": params.spec,
        "layers": [{"heads": l.num_heads,
                    "mlp": None if l.mlp is None else {"hidden": l.mlp.W1.shape[0],
                                                        "activation": l.mlp.activation}}
                   for l in params.layers],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> TransformerParams:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + n])
    data = np.frombuffer(raw[16 + n:], dtype="<f8")
    d, pos, layers = header["d"], 0, []

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        if pos + size > data.size:
            raise ValueError(f"{path}: truncated checkpoint")
        out = data[pos:pos + size].reshape(shape).copy()
        pos += size
        return out

    for ld in header["layers"]:
        M = ld["heads"]
        Q, K, V = take((M, d, d)), take((M, d, d)), take((M, d, d))
        mlp = None
        if ld["mlp"] is not None:
            dh = ld["mlp"]["hidden"]
            mlp = MlpLayer(take((dh, d)), take((d, dh)), ld["mlp"]["activation"])
        layers.append(Layer(Q, K, V, mlp))
    if pos != data.size:
        raise ValueError(f"{path}: trailing data in checkpoint")
    return TransformerParams(layers, d, tuple(header["extraction"]), header["head_mode"],
                             header["zeta"], header["clip_radius"], header["spec"])


def checkpoint_spec(params: TransformerParams) -> EmbeddingSpec:
    return EmbeddingSpec.from_dict(params.spec["embedding"])


# --- inference -----------------------------------------------------------------------------

@dataclass
class PlayResult:
    """Per-game trajectories and per-step policies at every state.

    Decentralized: ``policies["max"]`` ``(games, T, S, A)`` and ``policies["min"]``
    ``(games, T, S, B)``; centralized: ``policies["joint"]`` ``(games, T, S, A, B)``.
    """

    steps: list[list[tuple]]
    policies: dict


def _policy_batch(params: TransformerParams, spec: EmbeddingSpec, buffers: np.ndarray,
                  tau: int, window: int) -> np.ndarray:
    """Policies at all states for step ``tau``; ``buffers`` is ``(games, 2T, d)``."""
    m = min(2 * tau, window - 1)
    X = buffers[:, 2 * tau - m:2 * tau]
    Y = np.broadcast_to(state_tokens(spec, np.arange(spec.S), tau), (buffers.shape[0], spec.S, spec.d))
    _, out = tf_forward(params, X, np.ascontiguousarray(Y), np.full(spec.S, m + 1.0))
    return apply_head(extract(params, out), params.head_mode, params.zeta)


def _check_spec(spec: EmbeddingSpec, game: MarkovGame, G: int, mode: str) -> None:
    if (spec.H, spec.S, spec.A, spec.B) != game.dims:
        raise ValueError("checkpoint dimensions do not match the game")
    if spec.mode != mode:
        raise ValueError(f"checkpoint role {spec.mode!r} where {mode!r} was expected")
    if G > spec.G:
        raise ValueError("inference horizon exceeds the checkpoint's episode budget")


def infer_play(games: Sequence[MarkovGame], G: int, rngs: Sequence[np.random.Generator],
               params_max: Optional[TransformerParams] = None,
               params_min: Optional[TransformerParams] = None,
               params_joint: Optional[TransformerParams] = None,
               window: Optional[int] = None) -> PlayResult:
    """Roll ``G`` episodes on each game with frozen models, batched across games.

    Pass ``params_max`` and ``params_min`` for decentralized play (each model
    sees only its own actions and rewards) or ``params_joint`` for centralized
    play. ``window`` caps the prompt at the most recent tokens and defaults to
    the window used in training.
    """
    central = params_joint is not None
    if central == (params_max is not None or params_min is not None):
        raise ValueError("pass either both decentralized models or one joint model")
    roles = [("centralized", params_joint)] if central else \
        [("decentralized_max", params_max), ("decentralized_min", params_min)]
    specs = []
    for mode, p in roles:
        if p is None:
            raise ValueError("missing decentralized model")
        spec = checkpoint_spec(p)
        for game in games:
            _check_spec(spec, game, G, mode)
        specs.append(spec)
    H, S, A, B = games[0].dims
    T, n = G * H, len(games)
    if window is None:
        window = min(int(p.spec.get("window", 2 * T)) for _, p in roles)
    buffers = [np.zeros((n, 2 * T, sp.d)) for sp in specs]
    for buf, sp in zip(buffers, specs):
        # positional block of every token is known in advance
        sp.write_pos(buf, np.repeat(np.arange(T), 2)[None, :].repeat(n, 0),
                     np.arange(1, 2 * T + 1)[None, :].repeat(n, 0), np.tile([1.0, 0.0], T))
    if central:
        pol = {"joint": np.empty((n, T, S, A, B))}
    else:
        pol = {"max": np.empty((n, T, S, A)), "min": np.empty((n, T, S, B))}
    steps = [[] for _ in range(n)]
    states = np.array([g.initial_state for g in games])
    for tau in range(T):
        h = tau % H
        if h == 0:
            states = np.array([g.initial_state for g in games])
        probs = [_policy_batch(p, sp, buf, tau, window)
                 for (_, p), sp, buf in zip(roles, specs, buffers)]
        if central:
            pol["joint"][:, tau] = probs[0].reshape(n, S, A, B)
        else:
            pol["max"][:, tau], pol["min"][:, tau] = probs
        for k, game in enumerate(games):
            s = int(states[k])
            if central:
                p = probs[0][k, s]
                a, b = divmod(int(rngs[k].choice(A * B, p=p / p.sum())), B)
            else:
                pa, pb = probs[0][k, s], probs[1][k, s]
                a = int(rngs[k].choice(A, p=pa / pa.sum()))
                b = int(rngs[k].choice(B, p=pb / pb.sum()))
            r = float(game.reward[h, s, a, b])
            s_next = step_state(game, h, s, a, b, rngs[k])
            steps[k].append((tau // H, h, s, a, b, r))
            for (mode, _), sp, buf in zip(roles, specs, buffers):
                L = sp.layout
                buf[k, 2 * tau, L.span("state")[0] + s] = 1.0
                if mode == "centralized":
                    buf[k, 2 * tau + 1, L.span("act_a")[0] + a] = 1.0
                    buf[k, 2 * tau + 1, L.span("act_b")[0] + b] = 1.0
                    buf[k, 2 * tau + 1, L.idx("reward")] = r
                elif mode == "decentralized_max":
                    buf[k, 2 * tau + 1, L.span("act")[0] + a] = 1.0
                    buf[k, 2 * tau + 1, L.idx("reward")] = r
                else:
                    buf[k, 2 * tau + 1, L.span("act")[0] + b] = 1.0
                    buf[k, 2 * tau + 1, L.idx("reward")] = 1.0 - r
            states[k] = s_next
    return PlayResult(steps, pol)


def induced_policy(params: TransformerParams, steps, state: int) -> np.ndarray:
    """Policy of a model for one prompt: completed own-view steps plus the current state."""
    spec = checkpoint_spec(params)
    rows = view_arrays(steps, spec.mode)
    X = embed_steps(spec, rows)[None]
    Y = state_tokens(spec, [state], rows.shape[0])[None]
    _, out = tf_forward(params, X, Y, np.array([X.shape[1] + 1.0]))
    return apply_head(extract(params, out[0, 0]), params.head_mode, params.zeta)
