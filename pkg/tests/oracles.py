"""Slow, straight-line reference computations used only as test oracles.

Nothing here calls back into the package's numeric kernels.
"""

import math

import numpy as np


def naive_matmul(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i, j] = s
    return out


def naive_linear(x, w, b):
    out = naive_matmul(x, w)
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] += b[j]
    return out


def naive_softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def naive_layer_norm(x, gain, bias, eps=1e-5):
    out = np.zeros_like(np.asarray(x, dtype=float))
    for i, row in enumerate(x):
        d = len(row)
        mean = sum(row) / d
        var = sum((v - mean) ** 2 for v in row) / d
        for j, v in enumerate(row):
            out[i, j] = gain[j] * (v - mean) / math.sqrt(var + eps) + bias[j]
    return out


def naive_gelu(v):
    return 0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v**3)))


def naive_feedforward(x, w1, b1, w2, b2):
    h = naive_linear(x, w1, b1)
    h = np.vectorize(naive_gelu)(h)
    return naive_linear(h, w2, b2)


def naive_mha(q, k, v, p: dict, heads: int):
    """One head at a time, one query at a time."""
    qp = naive_linear(q, p["wq"], p["bq"])
    kp = naive_linear(k, p["wk"], p["bk"])
    vp = naive_linear(v, p["wv"], p["bv"])
    dim = qp.shape[1]
    dh = dim // heads
    ctx = np.zeros((qp.shape[0], dim))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        for i in range(qp.shape[0]):
            scores = [
                float(np.dot(qp[i, cols], kp[j, cols])) / math.sqrt(dh)
                for j in range(kp.shape[0])
            ]
            weights = naive_softmax_row(scores)
            for j, wt in enumerate(weights):
                ctx[i, cols] += wt * vp[j, cols]
    return naive_linear(ctx, p["wo"], p["bo"])


def naive_aggregator_layer(ia, rv, lw: dict, heads: int):
    attn_p = {k[len("attn."):]: v for k, v in lw.items() if k.startswith("attn.")}
    qn = naive_layer_norm(ia, lw["ln1.gain"], lw["ln1.bias"])
    kvn = naive_layer_norm(rv, lw["ln1.gain"], lw["ln1.bias"])
    a_out = np.asarray(ia) + naive_mha(qn, kvn, kvn, attn_p, heads)
    fn = naive_layer_norm(a_out, lw["ln2.gain"], lw["ln2.bias"])
    return a_out + naive_feedforward(fn, lw["ff.w1"], lw["ff.b1"], lw["ff.w2"], lw["ff.b2"])


def eig_top3(x):
    """Top-3 eigenpairs of the (n-1)-normalized covariance, sign-fixed like pca3."""
    x = np.asarray(x, dtype=float)
    c = x - x.mean(axis=0)
    cov = c.T @ c / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:3]
    vals, vecs = vals[order], vecs[:, order].T.copy()
    for i in range(3):
        if vecs[i, np.argmax(np.abs(vecs[i]))] < 0:
            vecs[i] = -vecs[i]
    return vals, vecs


def python_mean_rows(rows):
    rows = [list(r) for r in rows]
    n = len(rows)
    return np.array([sum(col) / n for col in zip(*rows)])
