"""Encoder-only attention regressor for scalar time series.

Shapes: a batch of inputs is ``(B, W)``; the model embeds each scalar to
``d`` features, adds sinusoidal position codes, runs one post-LN encoder
layer (multi-head self-attention, ReLU feed-forward) and decodes a pooled
vector to one scalar.

Two implementations share one parameter dict. ``forward``/``backward``
evaluate the whole sequence and are the reference. ``forward_last`` and
``backward_last`` are exact for last-position pooling but only compute the
final query row: because the embedding is affine in a scalar input, every
key is ``x_t * u_k + Ck[t]`` with ``u_k = w_e W_k`` and
``Ck = (PE + b_e) W_k + b_k``, so keys and values never need to be
materialised. That brings one series from ~60 M to ~0.8 M multiply-adds.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

LN_EPS = 1e-5
POOLING = ("last", "mean")


@dataclass(frozen=True)
class PredictorConfig:
    window: int = 250
    embed_dim: int = 250
    heads: int = 10
    encoder_layers: int = 1
    ffn_dim: int = 1000
    lr: float = 1e-3
    lr_decay: float = 0.95
    epochs: int = 20
    batch_size: int = 32
    train_fraction: float = 0.8
    seed: int = 0
    pooling: str = "last"
    use_pe: bool = True
    clip_norm: float = 5.0

    def __post_init__(self):
        if min(self.window, self.embed_dim, self.heads, self.ffn_dim, self.batch_size) <= 0:
            raise ValueError("dimensions must be positive")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.encoder_layers != 1:
            raise ValueError("only a single encoder layer is implemented")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.lr < 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("invalid learning-rate schedule")
        if self.pooling not in POOLING:
            raise ValueError(f"pooling must be one of {POOLING}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


PARAM_NAMES = ("w_e", "b_e", "W_q", "b_q", "W_k", "b_k", "W_v", "b_v", "W_o", "b_o", "g1", "be1",
               "W_1", "b_1", "W_2", "b_2", "g2", "be2", "w_d", "b_d")


def positional_encode(window: int, embed_dim: int) -> np.ndarray:
    """Sinusoidal table: sin on even columns, cos on odd, period growing with the column."""
    if window <= 0 or embed_dim <= 0:
        raise ValueError("dimensions must be positive")
    pos = np.arange(window, dtype=np.float64)[:, None]
    i2 = np.arange(0, embed_dim, 2, dtype=np.float64)
    ang = pos / np.power(10000.0, i2 / embed_dim)
    pe = np.zeros((window, embed_dim))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, : embed_dim // 2])
    return pe


def init_params(cfg: PredictorConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    d, f = cfg.embed_dim, cfg.ffn_dim

    def glorot(n_in, n_out):
        lim = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-lim, lim, size=(n_in, n_out))

    p = {
        "w_e": rng.normal(0.0, 1.0, size=d),
        "b_e": np.zeros(d),
        "W_q": glorot(d, d), "b_q": np.zeros(d),
        "W_k": glorot(d, d), "b_k": np.zeros(d),
        "W_v": glorot(d, d), "b_v": np.zeros(d),
        "W_o": glorot(d, d), "b_o": np.zeros(d),
        "g1": np.ones(d), "be1": np.zeros(d),
        "W_1": glorot(d, f), "b_1": np.zeros(f),
        "W_2": glorot(f, d), "b_2": np.zeros(d),
        "g2": np.ones(d), "be2": np.zeros(d),
        "w_d": rng.normal(0.0, 1.0 / np.sqrt(d), size=d),
        "b_d": np.zeros(1),
    }
    return p


def _const_embed(params, cfg: PredictorConfig, pe: np.ndarray | None) -> np.ndarray:
    C = np.broadcast_to(params["b_e"], (cfg.window, cfg.embed_dim)).copy()
    if cfg.use_pe:
        C += pe if pe is not None else positional_encode(cfg.window, cfg.embed_dim)
    return C


def _ln(z, g, b):
    mu = z.mean(axis=-1, keepdims=True)
    var = ((z - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (z - mu) * inv
    return g * xhat + b, (xhat, inv)


def _ln_back(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dz = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dz, (dy * xhat).sum(axis=red), dy.sum(axis=red)


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(x, cfg):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != cfg.window:
        raise ValueError(f"expected windows of length {cfg.window}, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    return x


# -- reference path ----------------------------------------------------------


def forward(params, x, cfg: PredictorConfig, pe: np.ndarray | None = None, return_cache: bool = False):
    """Full-sequence forward pass; returns predictions (B,) and optionally the cache."""
    x = _check_input(x, cfg)
    B, W = x.shape
    d, h, dh = cfg.embed_dim, cfg.heads, cfg.head_dim
    C = _const_embed(params, cfg, pe)
    X = x[:, :, None] * params["w_e"] + C
    Q = X @ params["W_q"] + params["b_q"]
    K = X @ params["W_k"] + params["b_k"]
    V = X @ params["W_v"] + params["b_v"]

    def heads(M):
        return M.reshape(B, W, h, dh).transpose(0, 2, 1, 3)

    Qh, Kh, Vh = heads(Q), heads(K), heads(V)
    S = Qh @ Kh.transpose(0, 1, 3, 2) / np.sqrt(dh)
    A = _softmax(S)
    O = (A @ Vh).transpose(0, 2, 1, 3).reshape(B, W, d)
    Z = O @ params["W_o"] + params["b_o"]
    H1, ln1 = _ln(X + Z, params["g1"], params["be1"])
    U = H1 @ params["W_1"] + params["b_1"]
    Hr = np.maximum(U, 0.0)
    F = Hr @ params["W_2"] + params["b_2"]
    H2, ln2 = _ln(H1 + F, params["g2"], params["be2"])
    P = H2[:, -1, :] if cfg.pooling == "last" else H2.mean(axis=1)
    y = P @ params["w_d"] + params["b_d"][0]
    if not return_cache:
        return y
    cache = dict(x=x, X=X, Qh=Qh, Kh=Kh, Vh=Vh, A=A, O=O, H1=H1, ln1=ln1, U=U, Hr=Hr, H2=H2, ln2=ln2, P=P)
    return y, cache


def backward(params, cache, dy, cfg: PredictorConfig) -> dict[str, np.ndarray]:
    """Gradients of ``sum(dy * y)`` for the reference path."""
    x, X = cache["x"], cache["X"]
    B, W = x.shape
    d, h, dh = cfg.embed_dim, cfg.heads, cfg.head_dim
    g = {}
    g["w_d"] = cache["P"].T @ dy
    g["b_d"] = np.array([dy.sum()])
    dP = dy[:, None] * params["w_d"]
    dH2 = np.zeros((B, W, d))
    if cfg.pooling == "last":
        dH2[:, -1, :] = dP
    else:
        dH2[:] = dP[:, None, :] / W
    dR2, g["g2"], g["be2"] = _ln_back(dH2, params["g2"], cache["ln2"])
    g["W_2"] = np.einsum("bwf,bwd->fd", cache["Hr"], dR2)
    g["b_2"] = dR2.sum(axis=(0, 1))
    dU = (dR2 @ params["W_2"].T) * (cache["U"] > 0)
    g["W_1"] = np.einsum("bwd,bwf->df", cache["H1"], dU)
    g["b_1"] = dU.sum(axis=(0, 1))
    dH1 = dR2 + dU @ params["W_1"].T
    dR1, g["g1"], g["be1"] = _ln_back(dH1, params["g1"], cache["ln1"])
    g["W_o"] = np.einsum("bwi,bwj->ij", cache["O"], dR1)
    g["b_o"] = dR1.sum(axis=(0, 1))
    dO = (dR1 @ params["W_o"].T).reshape(B, W, h, dh).transpose(0, 2, 1, 3)
    A = cache["A"]
    dA = dO @ cache["Vh"].transpose(0, 1, 3, 2)
    dVh = A.transpose(0, 1, 3, 2) @ dO
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) / np.sqrt(dh)
    dQh = dS @ cache["Kh"]
    dKh = dS.transpose(0, 1, 3, 2) @ cache["Qh"]

    def merge(M):
        return M.transpose(0, 2, 1, 3).reshape(B, W, d)

    dQ, dK, dV = merge(dQh), merge(dKh), merge(dVh)
    dX = dR1.copy()
    for name, dM in (("q", dQ), ("k", dK), ("v", dV)):
        g["W_" + name] = np.einsum("bwi,bwj->ij", X, dM)
        g["b_" + name] = dM.sum(axis=(0, 1))
        dX += dM @ params["W_" + name].T
    g["w_e"] = np.einsum("bw,bwd->d", x, dX)
    g["b_e"] = dX.sum(axis=(0, 1))
    return g


def attention_weights(params, x, cfg: PredictorConfig) -> np.ndarray:
    """Softmax attention weights (B, heads, W, W) of the reference path."""
    return forward(params, x, cfg, return_cache=True)[1]["A"]


# -- last-position fast path ---------------------------------------------------


class FastKernel:
    """Per-parameter-set precomputation for :func:`forward_last`."""

    def __init__(self, params, cfg: PredictorConfig, pe: np.ndarray | None = None):
        if cfg.pooling != "last":
            raise ValueError("the fast path needs last-position pooling")
        h, dh = cfg.heads, cfg.head_dim
        self.cfg = cfg
        self.params = params
        self.C = _const_embed(params, cfg, pe)
        self.Ck = (self.C @ params["W_k"] + params["b_k"]).reshape(cfg.window, h, dh)
        self.Cv = (self.C @ params["W_v"] + params["b_v"]).reshape(cfg.window, h, dh)
        self.uk = (params["w_e"] @ params["W_k"]).reshape(h, dh)
        self.uv = (params["w_e"] @ params["W_v"]).reshape(h, dh)
        # head-major copies for batched matmul
        self.CkT = np.ascontiguousarray(self.Ck.transpose(1, 2, 0))  # (h, dh, W)
        self.Cvh = np.ascontiguousarray(self.Cv.transpose(1, 0, 2))  # (h, W, dh)


def forward_last(params, x, cfg: PredictorConfig, kernel: FastKernel | None = None, return_cache: bool = False):
    """Exact forward pass for last-position pooling."""
    x = _check_input(x, cfg)
    kern = kernel or FastKernel(params, cfg)
    B = x.shape[0]
    d, h, dh = cfg.embed_dim, cfg.heads, cfg.head_dim
    p = params
    xl = x[:, -1]
    Xl = xl[:, None] * p["w_e"] + kern.C[-1]
    q = (Xl @ p["W_q"] + p["b_q"]).reshape(B, h, dh)
    alpha = (q * kern.uk).sum(axis=-1)
    beta = np.matmul(q.transpose(1, 0, 2), kern.CkT).transpose(1, 0, 2)  # (B, h, W)
    S = (x[:, None, :] * alpha[:, :, None] + beta) / np.sqrt(dh)
    A = _softmax(S)
    m = np.matmul(A, x[:, :, None])[:, :, 0]
    AV = np.matmul(A.transpose(1, 0, 2), kern.Cvh).transpose(1, 0, 2)  # (B, h, dh)
    O = (m[:, :, None] * kern.uv + AV).reshape(B, d)
    Z = O @ p["W_o"] + p["b_o"]
    H1, ln1 = _ln(Xl + Z, p["g1"], p["be1"])
    U = H1 @ p["W_1"] + p["b_1"]
    Hr = np.maximum(U, 0.0)
    F = Hr @ p["W_2"] + p["b_2"]
    H2, ln2 = _ln(H1 + F, p["g2"], p["be2"])
    y = H2 @ p["w_d"] + p["b_d"][0]
    if not return_cache:
        return y
    return y, dict(x=x, Xl=Xl, q=q, A=A, m=m, O=O, H1=H1, ln1=ln1, U=U, Hr=Hr, H2=H2, ln2=ln2, kern=kern)


def backward_last(params, cache, dy, cfg: PredictorConfig) -> dict[str, np.ndarray]:
    """Gradients of ``sum(dy * y)`` for :func:`forward_last`."""
    p = params
    kern: FastKernel = cache["kern"]
    x, Xl, q, A, m = cache["x"], cache["Xl"], cache["q"], cache["A"], cache["m"]
    B = x.shape[0]
    d, h, dh = cfg.embed_dim, cfg.heads, cfg.head_dim
    g = {}
    g["w_d"] = cache["H2"].T @ dy
    g["b_d"] = np.array([dy.sum()])
    dH2 = dy[:, None] * p["w_d"]
    dR2, g["g2"], g["be2"] = _ln_back(dH2, p["g2"], cache["ln2"])
    g["W_2"] = cache["Hr"].T @ dR2
    g["b_2"] = dR2.sum(axis=0)
    dU = (dR2 @ p["W_2"].T) * (cache["U"] > 0)
    g["W_1"] = cache["H1"].T @ dU
    g["b_1"] = dU.sum(axis=0)
    dH1 = dR2 + dU @ p["W_1"].T
    dR1, g["g1"], g["be1"] = _ln_back(dH1, p["g1"], cache["ln1"])
    g["W_o"] = cache["O"].T @ dR1
    g["b_o"] = dR1.sum(axis=0)
    dO = (dR1 @ p["W_o"].T).reshape(B, h, dh)

    # O = m * uv + A . Cv
    dm = np.einsum("bhj,hj->bh", dO, kern.uv)
    duv = np.einsum("bhj,bh->hj", dO, m)
    dA = dm[:, :, None] * x[:, None, :] + np.einsum("bhj,thj->bht", dO, kern.Cv)
    dCv = np.einsum("bht,bhj->thj", A, dO)
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) / np.sqrt(dh)

    # S = x * alpha + beta, alpha = q . uk, beta = q . Ck
    dalpha = np.einsum("bht,bt->bh", dS, x)
    dq = dalpha[:, :, None] * kern.uk + np.einsum("bht,thj->bhj", dS, kern.Ck)
    duk = np.einsum("bh,bhj->hj", dalpha, q)
    dCk = np.einsum("bht,bhj->thj", dS, q)

    dq = dq.reshape(B, d)
    g["W_q"] = Xl.T @ dq
    g["b_q"] = dq.sum(axis=0)
    dXl = dR1 + dq @ p["W_q"].T

    duk, duv = duk.reshape(d), duv.reshape(d)
    dCk, dCv = dCk.reshape(cfg.window, d), dCv.reshape(cfg.window, d)
    C = kern.C
    g["W_k"] = np.outer(p["w_e"], duk) + C.T @ dCk
    g["b_k"] = dCk.sum(axis=0)
    g["W_v"] = np.outer(p["w_e"], duv) + C.T @ dCv
    g["b_v"] = dCv.sum(axis=0)
    dC = dCk @ p["W_k"].T + dCv @ p["W_v"].T
    dC[-1] += dXl.sum(axis=0)
    g["w_e"] = p["W_k"] @ duk + p["W_v"] @ duv + dXl.T @ x[:, -1]
    g["b_e"] = dC.sum(axis=0)
    return g


def predict(params, x, cfg: PredictorConfig, kernel: FastKernel | None = None) -> np.ndarray:
    """Model output in normalised units, using the fast path when possible."""
    if cfg.pooling == "last":
        return forward_last(params, x, cfg, kernel)
    return forward(params, x, cfg)
