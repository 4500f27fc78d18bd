"""Analytic FLOP model of connector plus LLM prefill.

Only matrix multiplies are counted (2 FLOPs per multiply-add); layer norms,
softmax, activations, pooling adds, KV caching and kernel efficiency are
ignored. The baseline is an MLP projector over all visual tokens, i.e. the
"linear" connector of LLaVA-1.5 at 577 tokens.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace
from typing import Sequence

from .connector import ConnectorConfig

BASELINE_TOKENS = 577
TRAINING_FACTOR = 3.0  # forward + backward, applied to both sides of a ratio


@dataclass(frozen=True)
class LlmCostSpec:
    layers: int
    hidden: int
    ff_mult: float
    text_tokens: int

    def __post_init__(self):
        if min(self.layers, self.hidden, self.text_tokens) <= 0 or self.ff_mult <= 0:
            raise ValueError(f"LlmCostSpec fields must be positive: {self}")


# 32 layers, 4096 wide, 11008-wide gated MLP
VICUNA_7B = LlmCostSpec(layers=32, hidden=4096, ff_mult=2.6875, text_tokens=64)


@dataclass(frozen=True)
class CostReport:
    variant: str
    visual_tokens: int
    connector_flops: float
    llm_prefill_flops: float
    total: float
    speed_ratio_vs_baseline: float


def llm_prefill_flops(llm: LlmCostSpec, visual_tokens: int) -> float:
    """Attention projections + score/context products + three-matrix gated FF."""
    s = visual_tokens + llm.text_tokens
    h = llm.hidden
    attn = 2 * s * (4 * h * h + 2 * s * h)
    ff = 2 * s * 3 * llm.ff_mult * h * h
    return float(llm.layers * (attn + ff))


def linear_connector_flops(feature_dim: int, out_dim: int, tokens: int) -> float:
    """Two-layer MLP projector applied to every token."""
    return float(2 * tokens * (feature_dim * out_dim + out_dim * out_dim))


def connector_flops(cfg: ConnectorConfig, n_features: int = BASELINE_TOKENS) -> float:
    """Multiply-adds x2 of one forward of ``cfg`` over ``n_features`` feature rows."""
    t = cfg.token_budget
    n = n_features
    dm, ff = cfg.model_dim, cfg.ff_dim
    proj_in = dm * cfg.out_dim + cfg.out_dim * cfg.out_dim
    if cfg.variant in ("pooling", "top_p_direct", "evit_direct"):
        rows = t + (1 if cfg.variant == "evit_direct" else 0)
        return float(2 * rows * (cfg.feature_dim * dm + proj_in))
    macs = n * cfg.feature_dim * dm
    per_layer = (
        t * dm * dm          # queries
        + 2 * n * dm * dm    # keys, values
        + 2 * t * n * dm     # scores, context
        + t * dm * dm        # output projection
        + 2 * t * dm * ff    # feedforward
    )
    macs += cfg.layers * per_layer + t * proj_in
    return float(2 * macs)


def baseline_total(cfg: ConnectorConfig, llm: LlmCostSpec, n_features: int = BASELINE_TOKENS) -> float:
    return linear_connector_flops(cfg.feature_dim, cfg.out_dim, n_features) + llm_prefill_flops(
        llm, n_features
    )


def estimate_cost(
    cfg: ConnectorConfig,
    llm: LlmCostSpec,
    visual_tokens: int,
    *,
    n_features: int = BASELINE_TOKENS,
    training: bool = False,
) -> CostReport:
    """Cost of ``cfg`` emitting ``visual_tokens`` rows, relative to the linear baseline.

    ``cfg.token_budget`` is overridden by ``visual_tokens`` (minus one for
    EViT, whose extra fused row counts as a visual token).
    """
    if visual_tokens < 1 or n_features < 2:
        raise ValueError("visual_tokens and n_features must be positive")
    budget = visual_tokens - 1 if cfg.variant == "evit_direct" else visual_tokens
    c = connector_flops(replace(cfg, token_budget=max(budget, 1)), n_features)
    l = llm_prefill_flops(llm, visual_tokens)
    factor = TRAINING_FACTOR if training else 1.0
    total = (c + l) * factor
    base = baseline_total(cfg, llm, n_features) * factor
    return CostReport(cfg.variant, visual_tokens, c * factor, l * factor, total, base / total)


def cost_table(
    budgets: Sequence[int],
    llm: LlmCostSpec,
    cfg: ConnectorConfig | None = None,
    n_features: int = BASELINE_TOKENS,
) -> list[CostReport]:
    if not budgets:
        raise ValueError("cost_table needs at least one budget")
    cfg = cfg or ConnectorConfig()
    return [estimate_cost(cfg, llm, b, n_features=n_features) for b in budgets]


TSV_COLUMNS = ("variant", "visual_tokens", "connector_flops", "llm_flops", "ratio")


def format_tsv(reports: Sequence[CostReport]) -> str:
    buf = io.StringIO()
    buf.write("\t".join(TSV_COLUMNS) + "\n")
    for r in reports:
        buf.write(
            f"{r.variant}\t{r.visual_tokens}\t{r.connector_flops:.6e}\t"
            f"{r.llm_prefill_flops:.6e}\t{r.speed_ratio_vs_baseline:.4f}\n"
        )
    return buf.getvalue()
