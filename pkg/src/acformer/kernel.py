"""Dense float64 primitives with hand-written backward passes.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)``. The plain-named functions (``matmul``, ``linear``,
...) are forward-only conveniences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _need_cache(cache, op: str):
    if cache is None:
        raise UsageError(f"{op}_backward called without a forward cache")
    return cache


class Rng:
    """Seeded random stream; identical seeds give identical draws.

    Thin wrapper over ``numpy.random.Generator`` so callers pass one explicit
    object around instead of touching global state.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.default_rng(self.seed)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def trunc_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal draws resampled until inside ``+-bound*std``."""
        out = self._gen.normal(0.0, 1.0, size=shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.normal(0.0, 1.0, size=int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def sample(self, population: int, k: int) -> np.ndarray:
        """``k`` distinct integers from ``range(population)``."""
        return self._gen.choice(population, size=k, replace=False)


# ---------------------------------------------------------------- matmul


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return matmul_forward(a, b)[0]


def matmul_forward(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b, (a, b)


def matmul_backward(dout, cache):
    a, b = _need_cache(cache, "matmul")
    return dout @ b.T, a.T @ dout


# ---------------------------------------------------------------- linear


def linear(x, w, b) -> np.ndarray:
    return linear_forward(x, w, b)[0]


def linear_forward(x, w, b):
    x = as_matrix(x, "x")
    w = as_matrix(w, "w")
    b = np.asarray(b, dtype=np.float64)
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    return x @ w + b, (x, w)


def linear_backward(dout, cache):
    """Returns ``(dx, dw, db)``."""
    x, w = _need_cache(cache, "linear")
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


# ---------------------------------------------------------------- softmax


def softmax_rows(m) -> np.ndarray:
    m = as_matrix(m)
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_forward(m):
    p = softmax_rows(m)
    return p, p


def softmax_rows_backward(dout, cache):
    p = _need_cache(cache, "softmax_rows")
    return p * (dout - (dout * p).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------- layer norm


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> np.ndarray:
    return layer_norm_forward(x, gain, bias, eps)[0]


def layer_norm_forward(x, gain, bias, eps: float = LN_EPS):
    x = as_matrix(x, "x")
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm: gain {gain.shape}/bias {bias.shape} vs input {x.shape}"
        )
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dout, cache):
    """Returns ``(dx, dgain, dbias)``."""
    xhat, inv, gain = _need_cache(cache, "layer_norm")
    d = xhat.shape[1]
    dxhat = dout * gain
    dx = (inv / d) * (
        d * dxhat
        - dxhat.sum(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
    )
    return dx, (dout * xhat).sum(axis=0), dout.sum(axis=0)


# ---------------------------------------------------------------- activations


def gelu(x) -> np.ndarray:
    """tanh approximation."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_forward(x):
    return gelu(x), np.asarray(x, dtype=np.float64)


def gelu_backward(dout, cache):
    x = _need_cache(cache, "gelu")
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    dt = _GELU_C * (1.0 + 3 * 0.044715 * x**2) * (1.0 - t * t)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * dt)


def relu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0), x


def relu_backward(dout, cache):
    x = _need_cache(cache, "relu")
    return dout * (x > 0)


_ACTIVATIONS = {
    "gelu": (gelu_forward, gelu_backward),
    "relu": (relu_forward, relu_backward),
}


# ---------------------------------------------------------------- feedforward


def feedforward_forward(x, w1, b1, w2, b2, activation: str = "gelu"):
    try:
        act_fwd, _ = _ACTIVATIONS[activation]
    except KeyError:
        raise ConfigError(f"unknown activation {activation!r}") from None
    h, c1 = linear_forward(x, w1, b1)
    a, c2 = act_fwd(h)
    out, c3 = linear_forward(a, w2, b2)
    return out, (c1, c2, c3, activation)


def feedforward_backward(dout, cache):
    """Returns ``(dx, {"w1", "b1", "w2", "b2"})``."""
    c1, c2, c3, activation = _need_cache(cache, "feedforward")
    da, dw2, db2 = linear_backward(dout, c3)
    dh = _ACTIVATIONS[activation][1](da, c2)
    dx, dw1, db1 = linear_backward(dh, c1)
    return dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


# ---------------------------------------------------------------- attention


@dataclass
class AttentionParams:
    """Projection weights of one multi-head attention block.

    ``wq``/``wk``/``wv`` map their inputs to the model width, ``wo`` maps the
    concatenated heads back out.
    """

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "") -> "AttentionParams":
        return cls(**{f.name: d[prefix + f.name] for f in fields(cls)})

    def names(self):
        return [f.name for f in fields(self)]


def _split_heads(m: np.ndarray, heads: int) -> np.ndarray:
    # (rows, heads*dh) -> (heads, rows, dh)
    rows, dim = m.shape
    return m.reshape(rows, heads, dim // heads).transpose(1, 0, 2)


def _merge_heads(m: np.ndarray) -> np.ndarray:
    heads, rows, dh = m.shape
    return m.transpose(1, 0, 2).reshape(rows, heads * dh)


def mh_cross_attention(q, k, v, params: AttentionParams, heads: int) -> np.ndarray:
    return mh_cross_attention_forward(q, k, v, params, heads)[0]


def mh_cross_attention_forward(q, k, v, params: AttentionParams, heads: int):
    """Multi-head attention of ``q`` rows over ``k``/``v`` rows.

    Output has one row per query row and ``params.wo.shape[1]`` columns.
    """
    k = as_matrix(k, "k")
    v = as_matrix(v, "v")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: keys {k.shape} and values {v.shape} differ in rows")
    dim = params.wq.shape[1]
    if heads < 1 or dim % heads:
        raise ConfigError(f"attention: model dim {dim} not divisible by {heads} heads")
    if params.wk.shape[1] != dim or params.wv.shape[1] != dim or params.wo.shape[0] != dim:
        raise ShapeError(
            f"attention: projection widths disagree "
            f"(wq {params.wq.shape}, wk {params.wk.shape}, wv {params.wv.shape}, wo {params.wo.shape})"
        )
    qp, cq = linear_forward(q, params.wq, params.bq)
    kp, ck = linear_forward(k, params.wk, params.bk)
    vp, cv = linear_forward(v, params.wv, params.bv)
    qh, kh, vh = (_split_heads(m, heads) for m in (qp, kp, vp))
    scale = 1.0 / math.sqrt(dim // heads)
    scores = np.matmul(qh, kh.transpose(0, 2, 1)) * scale
    z = scores - scores.max(axis=2, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=2, keepdims=True)
    ctx = _merge_heads(np.matmul(p, vh))
    out, co = linear_forward(ctx, params.wo, params.bo)
    return out, (cq, ck, cv, qh, kh, vh, p, scale, co, heads)


def mh_cross_attention_backward(dout, cache):
    """Returns ``(dq, dk, dv, grads)`` where ``grads`` is keyed like AttentionParams."""
    cq, ck, cv, qh, kh, vh, p, scale, co, heads = _need_cache(cache, "mh_cross_attention")
    dctx, dwo, dbo = linear_backward(dout, co)
    dctx_h = _split_heads(dctx, heads)
    dp = np.matmul(dctx_h, vh.transpose(0, 2, 1))
    dvh = np.matmul(p.transpose(0, 2, 1), dctx_h)
    ds = p * (dp - (dp * p).sum(axis=2, keepdims=True)) * scale
    dqh = np.matmul(ds, kh)
    dkh = np.matmul(ds.transpose(0, 2, 1), qh)
    dq, dwq, dbq = linear_backward(_merge_heads(dqh), cq)
    dk, dwk, dbk = linear_backward(_merge_heads(dkh), ck)
    dv, dwv, dbv = linear_backward(_merge_heads(dvh), cv)
    grads = {
        "wq": dwq, "bq": dbq, "wk": dwk, "bk": dbk,
        "wv": dwv, "bv": dbv, "wo": dwo, "bo": dbo,
    }
    return dq, dk, dv, grads
