"""Decoder-only transformer with ReLU-score masked attention.

Token matrices are stored row-wise: an array of shape ``(N, d)`` (or
``(batch, N, d)``) whose row ``i`` is token ``h_{i+1}``. Attention at token
``i`` (1-indexed) is

    h_i + sum_m (1/i) sum_{j<=i} relu(<Q_m h_i, K_m h_j>) V_m h_j

with no softmax over scores and no temperature. Query tokens that should not
become keys for anything else ("side" tokens) can be attached to a main
sequence: a side token at position ``p`` attends to main tokens ``j < p`` and
to itself, with normaliser ``1/p``. This lets one pass score several
alternative final tokens against a shared prefix.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .layout import Layout

HEAD_MODES = ("simplex", "softmax", "zeta")


@dataclass
class AttnHead:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray


@dataclass
class MlpLayer:
    W1: np.ndarray  # (d', d)
    W2: np.ndarray  # (d, d')
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "softmax"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class Layer:
    """One attention sublayer (heads stacked on axis 0) followed by an MLP."""

    Q: np.ndarray  # (M, d, d)
    K: np.ndarray
    V: np.ndarray
    mlp: Optional[MlpLayer] = None

    @classmethod
    def from_heads(cls, heads: Sequence[AttnHead], d: int, mlp: Optional[MlpLayer] = None):
        if heads:
            Q = np.stack([h.Q for h in heads]).astype(float)
            K = np.stack([h.K for h in heads]).astype(float)
            V = np.stack([h.V for h in heads]).astype(float)
        else:
            Q = K = V = np.zeros((0, d, d))
        return cls(Q, K, V, mlp)

    @property
    def heads(self) -> list[AttnHead]:
        return [AttnHead(q, k, v) for q, k, v in zip(self.Q, self.K, self.V)]

    @property
    def num_heads(self) -> int:
        return self.Q.shape[0]

    @property
    def d(self) -> int:
        return self.Q.shape[1]


@dataclass
class TransformerParams:
    layers: list[Layer]
    d: int
    extraction: tuple[int, int] = (0, 0)  # (start, length) of the output slot
    head_mode: str = "simplex"
    zeta: float = 0.0
    clip_radius: Optional[float] = None
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"unknown head mode {self.head_mode!r}")
        if self.head_mode == "zeta" and not 0.0 < self.zeta <= 1.0:
            raise ValueError("zeta must lie in (0, 1]")
        for layer in self.layers:
            if layer.Q.shape[1:] != (self.d, self.d) or layer.K.shape != layer.Q.shape \
                    or layer.V.shape != layer.Q.shape:
                raise ValueError("attention matrices must be d x d")
            if layer.mlp is not None:
                if layer.mlp.W1.shape[1] != self.d or layer.mlp.W2.shape != layer.mlp.W1.shape[::-1]:
                    raise ValueError("MLP shapes inconsistent with d")

    def copy(self) -> "TransformerParams":
        layers = [Layer(l.Q.copy(), l.K.copy(), l.V.copy(),
                        None if l.mlp is None else MlpLayer(l.mlp.W1.copy(), l.mlp.W2.copy(),
                                                            l.mlp.activation))
                  for l in self.layers]
        return replace(self, layers=layers, spec=dict(self.spec))

    def arrays(self) -> list[np.ndarray]:
        """Every trainable matrix in a fixed order (shared with gradients)."""
        out = []
        for l in self.layers:
            out += [l.Q, l.K, l.V]
            if l.mlp is not None:
                out += [l.mlp.W1, l.mlp.W2]
        return out


# --- elementwise helpers ---------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0)


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def clip_tokens(X: np.ndarray, R: float) -> np.ndarray:
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    scale = np.minimum(1.0, R / np.maximum(norms, 1e-300))
    return X * scale


def _clip_backward(X, dOut, R):
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    over = norms > R
    n = np.maximum(norms, 1e-300)
    proj = X * np.sum(X * dOut, axis=-1, keepdims=True) / n ** 2
    return np.where(over, (R / n) * (dOut - proj), dOut)


# --- attention ---------------------------------------------------------------------------------

def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n)))


def _side_mask(side_pos: np.ndarray, n: int) -> np.ndarray:
    # side token at position p sees main tokens 1..p-1
    return (np.arange(1, n + 1)[None, :] < side_pos[:, None]).astype(float)


def _proj(X, W):
    # (b, n, d) x (m, e, d) -> (b, m, n, e)
    return X[:, None] @ np.swapaxes(W, -1, -2)[None]


def _wgrad(dP, X):
    # sum_b dP[b, m]^T X[b] -> (m, e, d)
    return (np.swapaxes(dP, -1, -2) @ X[:, None]).sum(axis=0)


def _back(dP, W):
    # sum_m dP[b, m] W[m] -> (b, n, d)
    return (dP @ W[None]).sum(axis=1)


def attn_forward(layer: Layer, X: np.ndarray, Y: Optional[np.ndarray] = None,
                 side_pos: Optional[np.ndarray] = None, cache: Optional[dict] = None):
    """Masked ReLU attention on main tokens ``X`` and optional side tokens ``Y``.

    Returns ``(X_out, Y_out)``; ``Y_out`` is None without side tokens.
    """
    squeeze = X.ndim == 2
    if squeeze:
        X = X[None]
        Y = None if Y is None else Y[None]
    n = X.shape[1]
    inv_pos = 1.0 / np.arange(1, n + 1)
    out_x = X.copy()
    out_y = None if Y is None else Y.copy()
    if layer.num_heads:
        Q, K, V = layer.Q, layer.K, layer.V
        qx = _proj(X, Q)
        kx = _proj(X, K)
        vx = _proj(X, V)
        s_mm = qx @ np.swapaxes(kx, -1, -2)
        mask = causal_mask(n)
        p_mm = relu(s_mm) * mask
        out_x += inv_pos[:, None] * (p_mm @ vx).sum(axis=1)
        if cache is not None:
            cache.update(X=X, qx=qx, kx=kx, vx=vx, s_mm=s_mm, p_mm=p_mm, mask=mask, inv_pos=inv_pos)
        if Y is not None:
            side_pos = np.asarray(side_pos, dtype=float)
            inv_side = 1.0 / side_pos
            qy = _proj(Y, Q)
            ky = _proj(Y, K)
            vy = _proj(Y, V)
            mask_s = _side_mask(side_pos, n)
            s_sm = qy @ np.swapaxes(kx, -1, -2)
            p_sm = relu(s_sm) * mask_s
            s_self = np.sum(qy * ky, axis=-1)
            p_self = relu(s_self)
            agg = p_sm @ vx + p_self[..., None] * vy
            out_y += inv_side[:, None] * agg.sum(axis=1)
            if cache is not None:
                cache.update(Y=Y, qy=qy, ky=ky, vy=vy, s_sm=s_sm, p_sm=p_sm, mask_s=mask_s,
                             s_self=s_self, p_self=p_self, inv_side=inv_side)
    if squeeze:
        return out_x[0], None if out_y is None else out_y[0]
    return out_x, out_y


def _attn_backward(layer: Layer, cache: dict, dOX, dOY):
    dX = dOX.copy()
    dY = None if dOY is None else dOY.copy()
    if not layer.num_heads:
        z = np.zeros_like(layer.Q)
        return dX, dY, z, z.copy(), z.copy()
    Q, K, V = layer.Q, layer.K, layer.V
    X, qx, kx, vx = cache["X"], cache["qx"], cache["kx"], cache["vx"]
    gx = cache["inv_pos"][:, None] * dOX  # (b, n, d)
    # d(p_mm @ vx) per head: same upstream for every head
    dp_mm = gx[:, None] @ np.swapaxes(vx, -1, -2)
    dvx = np.swapaxes(cache["p_mm"], -1, -2) @ gx[:, None]
    ds_mm = dp_mm * (cache["s_mm"] > 0) * cache["mask"]
    dqx = ds_mm @ kx
    dkx = np.swapaxes(ds_mm, -1, -2) @ qx
    if dOY is not None and "qy" in cache:
        qy, ky, vy = cache["qy"], cache["ky"], cache["vy"]
        Y = cache["Y"]
        gy = cache["inv_side"][:, None] * dOY
        dp_sm = gy[:, None] @ np.swapaxes(vx, -1, -2)
        dvx += np.swapaxes(cache["p_sm"], -1, -2) @ gy[:, None]
        dp_self = np.einsum("bkd,bmkd->bmk", gy, vy)
        dvy = cache["p_self"][..., None] * gy[:, None]
        ds_sm = dp_sm * (cache["s_sm"] > 0) * cache["mask_s"]
        ds_self = dp_self * (cache["s_self"] > 0)
        dqy = ds_sm @ kx + ds_self[..., None] * ky
        dkx += np.swapaxes(ds_sm, -1, -2) @ qy
        dky = ds_self[..., None] * qy
        dQ = _wgrad(dqy, Y)
        dK = _wgrad(dky, Y)
        dV = _wgrad(dvy, Y)
        dY += (_back(dqy, Q) + _back(dky, K)
               + _back(dvy, V))
    else:
        dQ = np.zeros_like(Q)
        dK = np.zeros_like(K)
        dV = np.zeros_like(V)
    dQ += _wgrad(dqx, X)
    dK += _wgrad(dkx, X)
    dV += _wgrad(dvx, X)
    dX += (_back(dqx, Q) + _back(dkx, K)
           + _back(dvx, V))
    return dX, dY, dQ, dK, dV


# --- MLP -------------------------------------------------------------------------------------

def mlp_forward(mlp: Optional[MlpLayer], X: np.ndarray, cache: Optional[dict] = None) -> np.ndarray:
    """Residual MLP ``h + W2 sigma(W1 h)`` applied to every token."""
    if mlp is None:
        return X
    Z = X @ mlp.W1.T
    A = relu(Z) if mlp.activation == "relu" else softmax(Z)
    if cache is not None:
        cache.setdefault("mlp", []).append((X, Z, A))
    return X + A @ mlp.W2.T


def _mlp_backward(mlp: MlpLayer, X, Z, A, dOut):
    dW2 = dOut.reshape(-1, dOut.shape[-1]).T @ A.reshape(-1, A.shape[-1])
    dA = dOut @ mlp.W2
    if mlp.activation == "relu":
        dZ = dA * (Z > 0)
    else:
        dZ = A * (dA - np.sum(dA * A, axis=-1, keepdims=True))
    dW1 = dZ.reshape(-1, dZ.shape[-1]).T @ X.reshape(-1, X.shape[-1])
    return dOut + dZ @ mlp.W1, dW1, dW2


# --- full network ----------------------------------------------------------------------------

def tf_forward(params: TransformerParams, X: np.ndarray, Y: Optional[np.ndarray] = None,
               side_pos: Optional[np.ndarray] = None, caches: Optional[list] = None):
    """Apply all layers. Returns the main output, or ``(main, side)`` when ``Y`` is given."""
    R = params.clip_radius
    if R is not None:
        X = clip_tokens(X, R)
        Y = None if Y is None else clip_tokens(Y, R)
    for layer in params.layers:
        cache = {} if caches is not None else None
        X, Y = attn_forward(layer, X, Y, side_pos, cache)
        X = mlp_forward(layer.mlp, X, cache)
        if Y is not None:
            Y = mlp_forward(layer.mlp, Y, cache)
        if R is not None:
            if cache is not None:
                cache["pre_clip"] = (X, Y)
            X = clip_tokens(X, R)
            Y = None if Y is None else clip_tokens(Y, R)
        if caches is not None:
            caches.append(cache)
    return X if Y is None else (X, Y)


def tf_backward(params: TransformerParams, caches: list, dX: np.ndarray,
                dY: Optional[np.ndarray] = None) -> list[np.ndarray]:
    """Reverse pass through cached layers; returns gradients aligned with ``params.arrays()``."""
    R = params.clip_radius
    grads_rev = []
    for layer, cache in zip(reversed(params.layers), reversed(caches)):
        if R is not None:
            Xp, Yp = cache["pre_clip"]
            dX = _clip_backward(Xp, dX, R)
            if dY is not None:
                dY = _clip_backward(Yp, dY, R)
        layer_grads = []
        if layer.mlp is not None:
            entries = cache["mlp"]
            if dY is not None and len(entries) == 2:
                Xy, Zy, Ay = entries[1]
                dY, dW1y, dW2y = _mlp_backward(layer.mlp, Xy, Zy, Ay, dY)
            else:
                dW1y = dW2y = 0.0
            Xm, Zm, Am = entries[0]
            dX, dW1, dW2 = _mlp_backward(layer.mlp, Xm, Zm, Am, dX)
            layer_grads = [dW1 + dW1y, dW2 + dW2y]
        if layer.num_heads == 0 and "X" not in cache:
            dQ = dK = dV = np.zeros_like(layer.Q)
        else:
            dX, dY, dQ, dK, dV = _attn_backward(layer, cache, dX, dY)
        grads_rev.append([dQ, dK, dV] + layer_grads)
    if R is not None:
        pass  # input clipping is treated as part of the (constant) embedding
    out = []
    for g in reversed(grads_rev):
        out += g
    return out


# --- heads ---------------------------------------------------------------------------------

def project_simplex(z: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of ``z`` onto the probability simplex."""
    z = np.asarray(z, dtype=float)
    u = -np.sort(-z, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    k = np.arange(1, z.shape[-1] + 1)
    cond = u - css / k > 0
    rho = z.shape[-1] - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1)
    return np.maximum(z - theta, 0.0)


def apply_head(z: np.ndarray, mode: str, zeta: float = 0.0) -> np.ndarray:
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite policy logits")
    if mode == "softmax":
        return softmax(z)
    p = project_simplex(z)
    if mode == "zeta":
        return (1.0 - zeta) * p + zeta / z.shape[-1]
    return p


def extract(params: TransformerParams, tokens: np.ndarray) -> np.ndarray:
    start, length = params.extraction
    return tokens[..., start:start + length]


def induced_policy_from_tokens(params: TransformerParams, X: np.ndarray) -> np.ndarray:
    """Policy read from the last token of ``X`` (``(N, d)`` or ``(batch, N, d)``)."""
    out = tf_forward(params, X)
    return apply_head(extract(params, out[..., -1, :]), params.head_mode, params.zeta)


# --- parameter norm ----------------------------------------------------------------------------

def operator_norm(M: np.ndarray, iters: int = 200, tol: float = 1e-10) -> float:
    """Largest singular value by power iteration on ``M^T M``."""
    M = np.asarray(M, dtype=float)
    if M.size == 0 or not np.any(M):
        return 0.0
    v = np.random.default_rng(0).standard_normal(M.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = M.T @ (M @ v)
        new = float(np.linalg.norm(w))
        if new == 0.0:
            return 0.0
        v = w / new
        if abs(new - lam) <= tol * new:
            lam = new
            break
        lam = new
    return float(np.sqrt(lam))


def param_norm(params: TransformerParams) -> float:
    best = 0.0
    for layer in params.layers:
        qk = max((max(operator_norm(q), operator_norm(k)) for q, k in zip(layer.Q, layer.K)),
                 default=0.0)
        total = qk + sum(operator_norm(v) for v in layer.V)
        if layer.mlp is not None:
            total += operator_norm(layer.mlp.W1) + operator_norm(layer.mlp.W2)
        best = max(best, total)
    return best


def empty_params(layout: Layout, extraction_block: str = "out", **kw) -> TransformerParams:
    return TransformerParams([], layout.d, layout.span(extraction_block), **kw)
