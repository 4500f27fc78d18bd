"""Synthetic feature maps and CLS attention maps.

``planted`` mode pushes every head's attention onto a known set of visual
tokens (logit margin of 8 over uniform noise in [0, 1)), so the selection
ground truth is exact. Planted rows also get a large shared offset so they
stand out in the PCA projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .kernel import Rng

STRUCTURES = ("random", "planted")
PLANT_MARGIN = 8.0
PLANT_OFFSET = 6.0


@dataclass
class SynthResult:
    features: np.ndarray     # (N, D), row 0 is [CLS]
    attn: np.ndarray         # (H, N-1), CLS column dropped after softmax
    planted: list[int]       # visual-token indices, empty in random mode


def _cls_attention(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return p[:, 1:]


def synthesize(
    seed: int,
    n_tokens: int,
    dim: int,
    heads: int,
    structure: str = "random",
    planted=None,
    n_planted: int | None = None,
) -> SynthResult:
    """Build ``n_tokens`` feature rows (incl. [CLS]) and an ``(heads, n_tokens-1)`` map.

    In planted mode pass explicit visual indices via ``planted`` or a count
    via ``n_planted`` (drawn without replacement).
    """
    if n_tokens < 2 or dim < 1 or heads < 1:
        raise ConfigError(f"invalid synth dims N={n_tokens}, D={dim}, H={heads}")
    if structure not in STRUCTURES:
        raise ConfigError(f"unknown structure {structure!r}; expected one of {STRUCTURES}")
    visual = n_tokens - 1
    rng = Rng(seed)
    features = rng.normal((n_tokens, dim))
    if structure == "random":
        return SynthResult(features, _cls_attention(rng.normal((heads, n_tokens))), [])

    if planted is None:
        if n_planted is None or not 0 <= n_planted <= visual:
            raise ConfigError(f"planted mode needs 0 <= n_planted <= {visual}, got {n_planted}")
        planted = sorted(rng.sample(visual, n_planted).tolist())
    else:
        planted = sorted(int(j) for j in planted)
        if len(set(planted)) != len(planted) or any(j < 0 or j >= visual for j in planted):
            raise ConfigError(f"planted indices must be distinct and in [0, {visual})")
    logits = rng.uniform((heads, n_tokens))
    idx = np.asarray(planted, dtype=np.int64) + 1
    logits[:, idx] += PLANT_MARGIN
    direction = rng.normal(dim)
    direction /= np.linalg.norm(direction)
    features[idx] += PLANT_OFFSET * direction
    return SynthResult(features, _cls_attention(logits), planted)
