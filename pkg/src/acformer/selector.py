"""Visual-anchor selection from the last-layer [CLS] attention map.

Coordinates: the attention map excludes the [CLS] column, so visual token
``j`` lives at column ``j``. Returned anchor lists use full-sequence indices
where [CLS] is 0 and visual token ``j`` is ``j + 1``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError


def check_attention_map(attn, raw_softmax: bool = False) -> np.ndarray:
    """Validate an ``(H, N-1)`` CLS attention map and return it as float64.

    With ``raw_softmax`` each head row must also sum to at most 1 (+1e-6),
    which holds when the [CLS] column was dropped from a softmax row.
    """
    a = np.asarray(attn, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"attention map must be (heads, visual_tokens), got {a.shape}")
    if not np.isfinite(a).all():
        raise DataError("attention map contains non-finite weights")
    if (a < 0).any():
        raise DataError("attention map contains negative weights")
    if raw_softmax and (a.sum(axis=1) > 1 + 1e-6).any():
        raise DataError("attention rows sum above 1; not a CLS-excluded softmax")
    return a


def head_quotas(t_n: int, heads: int) -> list[int]:
    """Split ``t_n`` across heads; the first ``t_n % heads`` heads take one extra."""
    base, extra = divmod(t_n, heads)
    return [base + (1 if h < extra else 0) for h in range(heads)]


def _check_budget(t_n: int, visual: int) -> int:
    t_n = int(t_n)
    if t_n < 0 or t_n > visual:
        raise ConfigError(f"budget of {t_n} anchors is outside [0, {visual}] visual tokens")
    return t_n


def select_anchors(attn, t_n: int) -> list[int]:
    """Progressive per-head top-k search.

    Head ``h`` ranks visual tokens by descending score (ties by ascending
    index) and contributes its quota of not-yet-selected tokens. Any quota a
    head cannot fill carries over to the next head.

    Returns ``[0, ...]`` of length ``t_n + 1`` in full-sequence coordinates.
    """
    a = check_attention_map(attn)
    heads, visual = a.shape
    t_n = _check_budget(t_n, visual)

    taken = np.zeros(visual, dtype=bool)
    picked: list[int] = []
    carry = 0
    for h, quota in enumerate(head_quotas(t_n, heads)):
        need = quota + carry
        if need:
            order = np.argsort(-a[h], kind="stable")
            fresh = order[~taken[order]][:need]
            taken[fresh] = True
            picked.extend(fresh.tolist())
            carry = need - len(fresh)
    # every head ranks all visual tokens, so carry can only survive when
    # every token is already taken, which t_n <= visual rules out
    assert len(picked) == t_n
    return [0] + [j + 1 for j in picked]


def selection_oracle(attn, t_n: int) -> list[int]:
    """Deliberately naive reference for :func:`select_anchors` (tests only)."""
    a = check_attention_map(attn)
    heads, visual = a.shape
    t_n = _check_budget(t_n, visual)
    rows = a.tolist()

    tl = [0]
    owed = 0
    for h in range(heads):
        quota = t_n // heads + (1 if h < t_n % heads else 0) + owed
        ranked = sorted(range(visual), key=lambda j: (-rows[h][j], j))
        got = 0
        for j in ranked:
            if got == quota:
                break
            if (j + 1) in tl:
                continue
            tl.append(j + 1)
            got += 1
        owed = quota - got
    return tl


def select_anchors_batch(attns: Sequence, t_n: int) -> list[list[int]]:
    """Independent selection per image."""
    return [select_anchors(a, t_n) for a in attns]


def gather_anchors(features, anchors: Sequence[int]) -> np.ndarray:
    """Rows of ``features`` at ``anchors``, in list order."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ShapeError(f"feature map must be 2-D, got {f.shape}")
    idx = np.asarray(anchors, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise DataError("anchor list must be a non-empty 1-D index sequence")
    if idx.min() < 0 or idx.max() >= f.shape[0]:
        raise DataError(f"anchor index out of range for {f.shape[0]} feature rows")
    return f[idx]
