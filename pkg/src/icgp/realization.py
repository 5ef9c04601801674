"""Hand-built transformer weights for the MWU planner of VI-ULCB.

Three fragments are constructed on a shared staged token layout:

* one MWU iteration (five layers) that, repeated ``G`` times from zeroed
  accumulators, reproduces :func:`icgp.no_regret.mwu_cce` with ``N = G``;
* value aggregation, writing ``pi . Qbar`` and ``pi . Qlow`` for every (h, s);
* policy lookup, copying the table keyed by the token's own (h, s) into the
  output slot.

Every head uses the same time gadget: a query carrying ``[x; t; C]`` against a
key carrying ``[y; -C; t_j]`` scores ``x . y - C (t - t_j)``, which is zero for
earlier steps once ``C`` dominates ``x . y``. Only the token itself (and, for an
action token, its state token) share ``t``; multiplying the value by the token
index ``i`` cancels the ``1/i`` prefix average.

State tokens (odd ``i``) carry the staged data; action tokens carry only the
positional block and must stay zero in every data slot.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .layout import Layout, positional_blocks
from .no_regret import max_player_losses, min_player_losses, mwu_cce
from .transformer import Layer, MlpLayer, TransformerParams, param_norm, tf_forward

REALIZE_CLIP = 1e6
SUBSTEPS = ("mwu_iteration", "value_aggregation", "policy_lookup")
TOLERANCES = {"mwu_iteration": 1e-9, "value_aggregation": 1e-10, "policy_lookup": 1e-8}
CONSTRUCTION_NOTES = (
    "MWU stack starts from all-zero accumulators and mu_0 = nu_0 = 0, so G repetitions equal "
    "the direct solver run for N = G rounds",
    "the head cancelling the o_plus/o_minus averaging reads only action tokens (key gated "
    "by 1 - v_j); the ungated head leaves a residual of -(4t - 1)/(2tA)",
    "de-averaging multiplies by i through an i^2 query scaled by C = 4 G^2 H^2, and a "
    "C (1 - v_i) term silences queries from action tokens; a plain identity value yields pi/i",
)


class ConstructionError(ValueError):
    """A built fragment would not fit the layout or the head budget."""


@dataclass(frozen=True)
class RealizeDims:
    A: int = 3
    B: int = 3
    H: int = 2
    S: int = 2
    G: int = 50


class StagedLayout:
    """Coordinate slots used by the constructions, plus the raw positional block."""

    def __init__(self, dims: RealizeDims):
        if min(dims.A, dims.B, dims.H, dims.S, dims.G) < 1:
            raise ConstructionError("dimensions must be positive")
        self.dims = dims
        A, B, H, S = dims.A, dims.B, dims.H, dims.S
        AB, HS = A * B, H * S
        blocks = [
            ("Lbar", AB), ("Llow", AB),
            ("o_plus", A), ("o_minus", B), ("O_plus", A), ("O_minus", B),
            ("mu", A), ("nu", B), ("mu_next", A), ("nu_next", B),
            ("prod", AB), ("Sigma", AB),
            ("pi", HS * AB), ("Qbar", HS * AB), ("Qlow", HS * AB), ("Vbar", HS), ("Vlow", HS),
            ("state", S), ("lookup", AB), ("out", AB),
        ] + positional_blocks(H)
        self.layout = Layout(blocks)
        budget = 16 * H * S * S * A * B + 64
        if self.layout.d > 16 * budget:
            raise ConstructionError("staged layout exceeds the dimension budget")

    @property
    def d(self) -> int:
        return self.layout.d

    def table_offset(self, block: str, h: int, s: int) -> int:
        AB = self.dims.A * self.dims.B
        return self.layout.span(block)[0] + (h * self.dims.S + s) * AB

    def write_pos(self, X: np.ndarray) -> None:
        """Raw positional features for tokens ``i = 1..N`` of ``X`` (shape ``(..., N, d)``)."""
        L, H, G = self.layout, self.dims.H, self.dims.G
        n = X.shape[-2]
        i = np.arange(1, n + 1)
        tau = (i - 1) // 2
        X[..., L.idx("pos_g")] = tau // H + 1
        X[..., L.idx("pos_h")] = tau % H + 1
        X[..., L.idx("pos_t")] = tau + 1
        X[..., L.idx("pos_v")] = (i % 2 == 1)
        X[..., L.idx("pos_i")] = i
        X[..., L.idx("pos_i2")] = i.astype(float) ** 2
        X[..., L.idx("pos_one")] = 1.0
        eh = L.span("pos_eh")[0] + tau % H
        X[..., np.arange(n), eh] = 1.0


# --- head helpers -----------------------------------------------------------------------------

class _HeadBuilder:
    def __init__(self, d: int):
        self.d = d
        self.Q, self.K, self.V = [], [], []

    def new(self):
        q, k, v = np.zeros((self.d, self.d)), np.zeros((self.d, self.d)), np.zeros((self.d, self.d))
        self.Q.append(q)
        self.K.append(k)
        self.V.append(v)
        return q, k, v

    def layer(self, mlp: Optional[MlpLayer] = None) -> Layer:
        if self.Q:
            return Layer(np.stack(self.Q), np.stack(self.K), np.stack(self.V), mlp)
        z = np.zeros((0, self.d, self.d))
        return Layer(z, z.copy(), z.copy(), mlp)


def _time_gadget(L: Layout, q: np.ndarray, k: np.ndarray, row: int, C: float) -> None:
    """Rows ``row`` and ``row+1`` of the query/key add ``C (t_j - t_i)`` to the score."""
    q[row, L.idx("pos_t")] = 1.0
    q[row + 1, L.idx("pos_one")] = C
    k[row, L.idx("pos_one")] = -C
    k[row + 1, L.idx("pos_t")] = 1.0


def _mlp(d: int, hidden: list[tuple[dict, dict]], activation: str = "relu") -> MlpLayer:
    """Build an MLP from ``(input weights, output weights)`` per hidden unit."""
    W1 = np.zeros((len(hidden), d))
    W2 = np.zeros((d, len(hidden)))
    for u, (inp, out) in enumerate(hidden):
        for c, w in inp.items():
            W1[u, c] = w
        for c, w in out.items():
            W2[c, u] = w
    return MlpLayer(W1, W2, activation)


# --- fragments ----------------------------------------------------------------------------------

def build_mwu_iteration(sl: StagedLayout) -> TransformerParams:
    """Five layers performing one virtual MWU round on every state token."""
    L, d = sl.layout, sl.d
    A, B, H, G = sl.dims.A, sl.dims.B, sl.dims.H, sl.dims.G
    Hf = float(H)
    layers = []

    # Layer 1: o_plus(a) = nu . Lbar(a, .), o_minus(b) = mu . Llow(., b); then fold into O.
    hb = _HeadBuilder(d)
    for a in range(A):
        q, k, v = hb.new()
        q[0, L.idx("pos_v")] = Hf          # (v - 1) * H on the query, H on the key
        q[0, L.idx("pos_one")] = -Hf
        k[0, L.idx("pos_one")] = 1.0
        for b in range(B):
            q[1 + b, L.idx("nu", b)] = 1.0
            k[1 + b, L.idx("Lbar", a * B + b)] = 1.0
        _time_gadget(L, q, k, 1 + B, Hf)
        v[L.idx("o_plus", a), L.idx("pos_i")] = 1.0
    for b in range(B):
        q, k, v = hb.new()
        q[0, L.idx("pos_v")] = Hf
        q[0, L.idx("pos_one")] = -Hf
        k[0, L.idx("pos_one")] = 1.0
        for a in range(A):
            q[1 + a, L.idx("mu", a)] = 1.0
            k[1 + a, L.idx("Llow", a * B + b)] = 1.0
        _time_gadget(L, q, k, 1 + A, Hf)
        v[L.idx("o_minus", b), L.idx("pos_i")] = 1.0
    fold = []
    for name, acc, n in (("o_plus", "O_plus", A), ("o_minus", "O_minus", B)):
        for j in range(n):
            fold.append(({L.idx(name, j): 1.0}, {L.idx(acc, j): 1.0, L.idx(name, j): -1.0}))
    layers.append(hb.layer(_mlp(d, fold)))

    # Layers 2-3: softmax MLPs write the next policies (uniform junk on action tokens).
    eta_a = np.sqrt(np.log(A) / G)
    eta_b = np.sqrt(np.log(B) / G)
    for acc, nxt, n, eta in (("O_plus", "mu_next", A, eta_a), ("O_minus", "nu_next", B, eta_b)):
        hidden = [({L.idx(acc, j): -eta}, {L.idx(nxt, j): 1.0}) for j in range(n)]
        layers.append(_HeadBuilder(d).layer(_mlp(d, hidden, "softmax")))

    # Layer 4: cancel the junk on action tokens, then move next -> current.
    hb = _HeadBuilder(d)
    q, k, v = hb.new()
    q[0, L.idx("pos_one")], q[0, L.idx("pos_v")] = 1.0, -1.0   # 1 - v_i
    k[0, L.idx("pos_one")], k[0, L.idx("pos_v")] = 1.0, -1.0   # 1 - v_j
    _time_gadget(L, q, k, 1, 1.0)
    for a in range(A):
        v[L.idx("mu_next", a), L.idx("pos_i")] = -1.0 / A
    for b in range(B):
        v[L.idx("nu_next", b), L.idx("pos_i")] = -1.0 / B
    move = []
    for cur, nxt, n in (("mu", "mu_next", A), ("nu", "nu_next", B)):
        for j in range(n):
            move.append(({L.idx(nxt, j): 1.0}, {L.idx(cur, j): 1.0, L.idx(nxt, j): -1.0}))
            move.append(({L.idx(cur, j): 1.0}, {L.idx(cur, j): -1.0}))
    layers.append(hb.layer(_mlp(d, move)))

    # Layer 5: prod(a, b) = mu(a) nu(b); Sigma += prod / G.
    hb = _HeadBuilder(d)
    for a in range(A):
        for b in range(B):
            q, k, v = hb.new()
            q[0, L.idx("mu", a)] = 1.0
            k[0, L.idx("nu", b)] = 1.0
            _time_gadget(L, q, k, 1, 1.0)
            v[L.idx("prod", a * B + b), L.idx("pos_i")] = 1.0
    acc = [({L.idx("prod", j): 1.0}, {L.idx("Sigma", j): 1.0 / G, L.idx("prod", j): -1.0})
           for j in range(A * B)]
    layers.append(hb.layer(_mlp(d, acc)))
    return TransformerParams(layers, d, L.span("Sigma"), head_mode="simplex",
                             clip_radius=REALIZE_CLIP, spec={"fragment": "mwu_iteration"})


def build_value_aggregation(sl: StagedLayout) -> TransformerParams:
    """One attention layer with ``2 H S`` heads writing Vbar and Vlow."""
    L, d = sl.layout, sl.d
    H, S, AB = sl.dims.H, sl.dims.S, sl.dims.A * sl.dims.B
    hb = _HeadBuilder(d)
    for h in range(H):
        for s in range(S):
            for qblock, vblock in (("Qbar", "Vbar"), ("Qlow", "Vlow")):
                q, k, v = hb.new()
                pi0, q0 = sl.table_offset("pi", h, s), sl.table_offset(qblock, h, s)
                for j in range(AB):
                    q[j, pi0 + j] = 1.0
                    k[j, q0 + j] = 1.0
                _time_gadget(L, q, k, AB, float(H))
                v[L.idx(vblock, h * S + s), L.idx("pos_i")] = 1.0
    return TransformerParams([hb.layer()], d, L.span("Vbar"), clip_radius=REALIZE_CLIP,
                             spec={"fragment": "value_aggregation"})


def build_policy_lookup(sl: StagedLayout) -> TransformerParams:
    """Two attention layers: ``H S`` keyed copy heads, then one de-averaging head."""
    L, d = sl.layout, sl.d
    H, S, G, AB = sl.dims.H, sl.dims.S, sl.dims.G, sl.dims.A * sl.dims.B
    hb = _HeadBuilder(d)
    for h in range(H):
        for s in range(S):
            q, k, v = hb.new()
            # score = [state = s] + [step = h] - 1 on same-step tokens
            for x in range(S):
                q[x, L.idx("state", x)] = 1.0
            k[s, L.idx("pos_one")] = 1.0
            for y in range(H):
                q[S + y, L.idx("pos_eh", y)] = 1.0
            k[S + h, L.idx("pos_one")] = 1.0
            q[S + H, L.idx("pos_one")] = 1.0
            k[S + H, L.idx("pos_one")] = -1.0
            _time_gadget(L, q, k, S + H + 1, 1.0)
            src = sl.table_offset("pi", h, s)
            for j in range(AB):
                v[L.idx("lookup", j), src + j] = 1.0
    first = hb.layer()

    # lookup holds pi / i on state tokens; score i^2 on the token itself undoes it.
    C = 4.0 * (G * H) ** 2
    hb = _HeadBuilder(d)
    q, k, v = hb.new()
    q[0, L.idx("pos_i2")] = 1.0
    k[0, L.idx("pos_one")] = 1.0
    _time_gadget(L, q, k, 1, C)
    q[3, L.idx("pos_one")], q[3, L.idx("pos_v")] = C, -C   # silences action-token queries
    k[3, L.idx("pos_one")] = -1.0
    for j in range(AB):
        v[L.idx("out", j), L.idx("lookup", j)] = 1.0
    second = hb.layer()
    return TransformerParams([first, second], d, L.span("out"), clip_radius=REALIZE_CLIP,
                             spec={"fragment": "policy_lookup"})


# --- staging and oracles ------------------------------------------------------------------------

def _random_tokens(sl: StagedLayout, batch: int, steps: int) -> np.ndarray:
    X = np.zeros((batch, 2 * steps, sl.d))
    sl.write_pos(X)
    return X


def stage_mwu(sl: StagedLayout, Q_upper: np.ndarray, Q_lower: np.ndarray) -> np.ndarray:
    """Tokens whose state tokens carry the normalized losses of ``Q_*[k, t']`` and zeroed state.

    ``Q_*`` have shape ``(batch, steps, A, B)``.
    """
    L, H = sl.layout, sl.dims.H
    batch, steps = Q_upper.shape[:2]
    X = _random_tokens(sl, batch, steps)
    X[:, 0::2, L.sl("Lbar")] = max_player_losses(Q_upper, H).reshape(batch, steps, -1)
    X[:, 0::2, L.sl("Llow")] = min_player_losses(Q_lower, H).reshape(batch, steps, -1)
    return X


def run_mwu_fragment(params: TransformerParams, X: np.ndarray, rounds: int) -> np.ndarray:
    for _ in range(rounds):
        X = tf_forward(params, X)
    return X


def _check_mwu(sl, params, rng, trials, steps):
    A, B, H, G = sl.dims.A, sl.dims.B, sl.dims.H, sl.dims.G
    Qu = rng.uniform(0, H, size=(trials, steps, A, B))
    Ql = np.minimum(Qu, rng.uniform(0, H, size=(trials, steps, A, B)))
    X = stage_mwu(sl, Qu, Ql)
    first = tf_forward(params, X)
    # single round from zero accumulators: mu_1 = nu_1 = uniform
    one_dev = max(np.max(np.abs(first[:, 0::2, sl.layout.sl("mu")] - 1.0 / A)),
                  np.max(np.abs(first[:, 0::2, sl.layout.sl("nu")] - 1.0 / B)))
    out = run_mwu_fragment(params, first, G - 1)
    got = out[:, 0::2, sl.layout.sl("Sigma")].reshape(trials, steps, A, B)
    want = mwu_cce(Qu, Ql, H, G).joint_policy
    junk = np.max(np.abs(out[:, 1::2, :sl.layout.span("state")[0]]))
    return float(max(np.max(np.abs(got - want)), junk)), float(one_dev)


def _check_value(sl, params, rng, trials, steps):
    L = sl.layout
    A, B, H, S = sl.dims.A, sl.dims.B, sl.dims.H, sl.dims.S
    X = _random_tokens(sl, trials, steps)
    pi = rng.dirichlet(np.ones(A * B), size=(trials, steps, H, S))
    Qb = rng.uniform(0, H, size=(trials, steps, H, S, A * B))
    Ql = rng.uniform(0, H, size=(trials, steps, H, S, A * B))
    X[:, 0::2, L.sl("pi")] = pi.reshape(trials, steps, -1)
    X[:, 0::2, L.sl("Qbar")] = Qb.reshape(trials, steps, -1)
    X[:, 0::2, L.sl("Qlow")] = Ql.reshape(trials, steps, -1)
    out = tf_forward(params, X)
    want_b = np.sum(pi * Qb, axis=-1).reshape(trials, steps, -1)
    want_l = np.sum(pi * Ql, axis=-1).reshape(trials, steps, -1)
    dev = max(np.max(np.abs(out[:, 0::2, L.sl("Vbar")] - want_b)),
              np.max(np.abs(out[:, 0::2, L.sl("Vlow")] - want_l)),
              np.max(np.abs(out[:, 1::2, L.sl("Vbar")])), np.max(np.abs(out[:, 1::2, L.sl("Vlow")])))
    return float(dev)


def _check_lookup(sl, params, rng, trials, steps):
    L = sl.layout
    A, B, H, S = sl.dims.A, sl.dims.B, sl.dims.H, sl.dims.S
    X = _random_tokens(sl, trials, steps)
    tables = rng.dirichlet(np.ones(A * B), size=(trials, H, S))
    states = rng.integers(S, size=(trials, steps))
    X[:, 0::2, L.sl("pi")] = tables.reshape(trials, 1, -1)
    X[:, 0::2, L.span("state")[0] + states] = 0.0
    for k in range(trials):
        X[k, 2 * np.arange(steps), L.span("state")[0] + states[k]] = 1.0
    out = tf_forward(params, X)
    h_of = np.arange(steps) % H
    want = tables[np.arange(trials)[:, None], h_of[None, :], states]
    got = out[:, 0::2, L.sl("out")]
    dev = max(np.max(np.abs(got - want)), np.max(np.abs(out[:, 1::2, L.sl("out")])),
              np.max(np.abs(got.sum(axis=-1) - 1.0)))
    return float(dev)


def head_counts(params: TransformerParams) -> list[int]:
    return [layer.num_heads for layer in params.layers]


def perturb_params(params: TransformerParams) -> TransformerParams:
    """Add 1 to the largest-magnitude value-matrix entry of the first attention layer."""
    out = params.copy()
    for layer in out.layers:
        if layer.num_heads:
            m, r, c = np.unravel_index(np.argmax(np.abs(layer.V)), layer.V.shape)
            layer.V[m, r, c] += 1.0
            return out
    raise ConstructionError("fragment has no attention head to perturb")


def verify_realization(dims: RealizeDims = RealizeDims(), trials: int = 50, seed: int = 0,
                       perturb: Optional[str] = None, tol: Optional[dict] = None,
                       steps: int = 3) -> dict:
    """Build all fragments, run them on staged random inputs and compare with direct oracles."""
    if perturb is not None and perturb not in SUBSTEPS:
        raise ValueError(f"unknown sub-step {perturb!r}")
    tol = {**TOLERANCES, **(tol or {})}
    report = {"dims": dims.__dict__, "trials": trials, "seed": seed, "tolerance": tol,
              "perturbed": perturb, "notes": list(CONSTRUCTION_NOTES), "substeps": {},
              "passed": True}
    if trials <= 0:
        return report
    sl = StagedLayout(dims)
    frags = {"mwu_iteration": build_mwu_iteration(sl),
             "value_aggregation": build_value_aggregation(sl),
             "policy_lookup": build_policy_lookup(sl)}
    if perturb is not None:
        frags[perturb] = perturb_params(frags[perturb])
    rng = np.random.default_rng(seed)
    checks = {"mwu_iteration": lambda p: _check_mwu(sl, p, rng, trials, steps),
              "value_aggregation": lambda p: _check_value(sl, p, rng, trials, steps),
              "policy_lookup": lambda p: _check_lookup(sl, p, rng, trials, steps)}
    budget = 16 * dims.H * dims.S ** 2 * dims.A * dims.B
    for name in SUBSTEPS:
        t0 = time.perf_counter()
        res = checks[name](frags[name])
        entry = {}
        if name == "mwu_iteration":
            res, one = res
            entry["first_round_max_dev"] = one
        counts = head_counts(frags[name])
        entry.update(max_dev=res, passed=bool(res <= tol[name]), heads_per_layer=counts,
                     within_head_budget=bool(max(counts) <= budget),
                     param_norm=param_norm(frags[name]), seconds=time.perf_counter() - t0)
        report["substeps"][name] = entry
        report["passed"] = report["passed"] and entry["passed"] and entry["within_head_budget"]
    return report


def format_report(report: dict) -> str:
    lines = [f"realization check dims={report['dims']} trials={report['trials']}"]
    for name, e in report["substeps"].items():
        status = "PASS" if e["passed"] else "FAIL"
        lines.append(f"  {name:18s} {status} max_dev={e['max_dev']:.3e} heads={e['heads_per_layer']} "
                     f"norm={e['param_norm']:.4g}")
    lines.append("overall: " + ("PASS" if report["passed"] else "FAIL"))
    return "\n".join(lines)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
