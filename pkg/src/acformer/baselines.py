"""Ablation connectors that differ from AcFormer only in how queries are built.

* ``pooling``      average-pooled patch grid + [CLS], straight into Proj
* ``pooling_pr``   pooled tokens as queries of the aggregation stack
* ``random_pr``    uniformly sampled feature rows (+[CLS]) as queries
* ``pr``           learnable query bank
* ``top_p_direct`` selected anchors straight into Proj, no stack
* ``evit_direct``  selected anchors plus one mean token of the rest, into Proj
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernel as K
from .connector import (
    AggregatorWeights,
    BankQueries,
    ConnectorConfig,
    GatherQueries,
    _require_variant,
    acformer_forward,
    check_pair,
    connector_forward,
)
from .errors import ConfigError, DataError, ShapeError
from .selector import check_attention_map, gather_anchors, select_anchors


@dataclass(frozen=True)
class PoolSpec:
    grid_in: int
    grid_out: int

    def __post_init__(self):
        if self.grid_in < 1 or self.grid_out < 1 or self.grid_in % self.grid_out:
            raise ConfigError(
                f"pool grid {self.grid_in} is not divisible into {self.grid_out} cells per side"
            )

    @property
    def token_budget(self) -> int:
        return self.grid_out**2 + 1

    @classmethod
    def for_budget(cls, visual_tokens: int, token_budget: int) -> "PoolSpec":
        """Pool a square ``visual_tokens`` grid down to ``token_budget - 1`` cells."""
        g_in = _square_side(visual_tokens)
        g_out = math.isqrt(token_budget - 1) if token_budget > 1 else 0
        if g_out * g_out != token_budget - 1:
            raise ConfigError(f"pooling budget {token_budget} is not a square plus [CLS]")
        return cls(g_in, g_out)


def _square_side(n: int) -> int:
    g = math.isqrt(n)
    if g * g != n:
        raise DataError(f"{n} patch tokens do not form a square grid")
    return g


def pool_tokens(features, spec: PoolSpec) -> np.ndarray:
    """[CLS] row followed by the 2-D average-pooled patch grid (row-major)."""
    f = K.as_matrix(features, "features")
    if f.shape[0] - 1 != spec.grid_in**2:
        raise DataError(
            f"{f.shape[0] - 1} patch rows do not form a {spec.grid_in}x{spec.grid_in} grid"
        )
    s = spec.grid_in // spec.grid_out
    g = spec.grid_out
    grid = f[1:].reshape(g, s, g, s, f.shape[1])
    pooled = grid.mean(axis=(1, 3)).reshape(g * g, f.shape[1])
    return np.concatenate([f[:1], pooled], axis=0)


def pool_tokens_backward(dout, spec: PoolSpec) -> np.ndarray:
    s = spec.grid_in // spec.grid_out
    g = spec.grid_out
    width = dout.shape[1]
    dgrid = np.broadcast_to(
        (dout[1:] / (s * s)).reshape(g, 1, g, 1, width), (g, s, g, s, width)
    )
    return np.concatenate([dout[:1], dgrid.reshape(spec.grid_in**2, width)], axis=0)


class PooledQueries:
    def __init__(self, spec: PoolSpec):
        self.spec = spec

    def build(self, adapted, w):
        return pool_tokens(adapted, self.spec)

    def backward(self, dq, d_adapted, grads):
        d_adapted += pool_tokens_backward(dq, self.spec)


def project_tokens(tokens, cfg: ConnectorConfig, w: AggregatorWeights) -> np.ndarray:
    """Adapter then Proj, with no aggregation stack."""
    tokens = K.as_matrix(tokens, "tokens")
    if tokens.shape[1] != cfg.feature_dim:
        raise ShapeError(f"token width {tokens.shape[1]} != feature_dim {cfg.feature_dim}")
    a = K.linear(tokens, w["adapter.w"], w["adapter.b"])
    out, _ = K.feedforward_forward(a, w["proj.w1"], w["proj.b1"], w["proj.w2"], w["proj.b2"])
    return out


def random_query_indices(visual_tokens: int, token_budget: int, seed: int) -> list[int]:
    """[CLS] plus ``token_budget - 1`` visual rows drawn without replacement."""
    t_n = token_budget - 1
    if not 0 <= t_n <= visual_tokens:
        raise ConfigError(f"budget {token_budget} exceeds {visual_tokens} visual tokens plus [CLS]")
    drawn = K.Rng(seed).sample(visual_tokens, t_n)
    return [0] + [int(j) + 1 for j in drawn]


def pooling_forward(features, cfg: ConnectorConfig, w: AggregatorWeights) -> np.ndarray:
    f = K.as_matrix(features, "features")
    spec = PoolSpec.for_budget(f.shape[0] - 1, cfg.token_budget)
    return project_tokens(pool_tokens(f, spec), cfg, w)


def pooling_pr_forward(features, cfg: ConnectorConfig, w: AggregatorWeights) -> np.ndarray:
    f = K.as_matrix(features, "features")
    spec = PoolSpec.for_budget(f.shape[0] - 1, cfg.token_budget)
    return connector_forward(f, cfg, w, PooledQueries(spec))[0]


def random_pr_forward(features, cfg: ConnectorConfig, w: AggregatorWeights, seed: int) -> np.ndarray:
    f = K.as_matrix(features, "features")
    idx = random_query_indices(f.shape[0] - 1, cfg.token_budget, seed)
    return connector_forward(f, cfg, w, GatherQueries(idx))[0]


def pr_forward(features, cfg: ConnectorConfig, w: AggregatorWeights) -> np.ndarray:
    out = connector_forward(features, cfg, w, BankQueries())[0]
    if out.shape[0] != cfg.token_budget:
        raise ShapeError(f"query bank has {out.shape[0]} rows, budget is {cfg.token_budget}")
    return out


def top_p_direct(features, attn, cfg: ConnectorConfig, w: AggregatorWeights) -> np.ndarray:
    """Selected anchors through adapter and Proj only."""
    f = check_pair(features, attn)
    return project_tokens(gather_anchors(f, select_anchors(attn, cfg.t_n)), cfg, w)


def evit_tokens(features, attn, token_budget: int) -> np.ndarray:
    """Anchor rows plus one row holding the mean of all unselected patch rows.

    With nothing left unselected the extra row is all zeros.
    """
    f = check_pair(features, attn)
    a = check_attention_map(attn)
    anchors = select_anchors(a, token_budget - 1)
    rest = np.setdiff1d(np.arange(1, f.shape[0]), anchors)
    fused = f[rest].mean(axis=0) if rest.size else np.zeros(f.shape[1])
    return np.concatenate([gather_anchors(f, anchors), fused[None, :]], axis=0)


def evit_fuse(features, attn, cfg: ConnectorConfig, w: AggregatorWeights) -> np.ndarray:
    return project_tokens(evit_tokens(features, attn, cfg.token_budget), cfg, w)


def output_rows(cfg: ConnectorConfig) -> int:
    return cfg.token_budget + (1 if cfg.variant == "evit_direct" else 0)


def run_connector(
    features, attn, cfg: ConnectorConfig, w: AggregatorWeights, seed: int = 0
) -> np.ndarray:
    """Dispatch on ``cfg.variant``; ``attn`` is ignored by query sources that do not read it."""
    v = cfg.variant
    if v == "acformer":
        return acformer_forward(features, attn, cfg, w)
    if v == "pr":
        return pr_forward(features, cfg, w)
    if v == "pooling":
        return pooling_forward(features, cfg, w)
    if v == "pooling_pr":
        return pooling_pr_forward(features, cfg, w)
    if v == "random_pr":
        return random_pr_forward(features, cfg, w, seed)
    if v == "top_p_direct":
        return top_p_direct(features, attn, cfg, w)
    _require_variant(cfg, "evit_direct")
    return evit_fuse(features, attn, cfg, w)


def stackless(cfg: ConnectorConfig) -> ConnectorConfig:
    """Same dims with zero aggregation layers."""
    return replace(cfg, layers=0)
