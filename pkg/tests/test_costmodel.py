import pytest

from acformer.connector import ConnectorConfig
from acformer.costmodel import (
    BASELINE_TOKENS,
    TSV_COLUMNS,
    VICUNA_7B,
    LlmCostSpec,
    connector_flops,
    cost_table,
    estimate_cost,
    format_tsv,
    linear_connector_flops,
    llm_prefill_flops,
)


def test_prefill_hand_count():
    # s = 2, h = 2: attention 2*2*(4*4 + 2*2*2) = 96, gated FF 2*2*3*1*4 = 48
    assert llm_prefill_flops(LlmCostSpec(1, 2, 1.0, 1), 1) == 144.0
    assert llm_prefill_flops(LlmCostSpec(3, 2, 1.0, 1), 1) == 3 * 144.0


def test_linear_connector_hand_count():
    assert linear_connector_flops(3, 2, 5) == 2 * 5 * (6 + 4)


def test_stackless_connector_hand_count():
    cfg = ConnectorConfig(layers=0, model_dim=4, heads=1, head_dim=4, ff_dim=8,
                          out_dim=2, feature_dim=3, token_budget=5, variant="top_p_direct")
    assert connector_flops(cfg) == 2 * 5 * (3 * 4 + 4 * 2 + 2 * 2)


def test_stack_scales_linearly_in_layers():
    one = connector_flops(ConnectorConfig(layers=1))
    two = connector_flops(ConnectorConfig(layers=2))
    zero = connector_flops(ConnectorConfig(layers=0))
    assert two - one == pytest.approx(one - zero)


def test_baseline_ratio_near_one():
    r = estimate_cost(ConnectorConfig(), VICUNA_7B, BASELINE_TOKENS)
    assert 0.9 < r.speed_ratio_vs_baseline < 1.0


def test_ratios_decrease_with_tokens():
    ratios = [r.speed_ratio_vs_baseline for r in cost_table([65, 145, 257, 577], VICUNA_7B)]
    assert all(a > b for a, b in zip(ratios, ratios[1:]))
    assert 1.8 <= ratios[1] <= 4.0
    assert 1.3 <= ratios[2] <= 2.5


def test_training_factor_cancels_in_ratio():
    cfg = ConnectorConfig()
    a = estimate_cost(cfg, VICUNA_7B, 145)
    b = estimate_cost(cfg, VICUNA_7B, 145, training=True)
    assert b.total == pytest.approx(3 * a.total)
    assert b.speed_ratio_vs_baseline == pytest.approx(a.speed_ratio_vs_baseline)


def test_evit_counts_fused_row_as_visual():
    r = estimate_cost(ConnectorConfig(variant="evit_direct"), VICUNA_7B, 146)
    assert r.llm_prefill_flops == llm_prefill_flops(VICUNA_7B, 146)


def test_tsv_format():
    text = format_tsv(cost_table([145, 257], VICUNA_7B))
    lines = text.splitlines()
    assert lines[0].split("\t") == list(TSV_COLUMNS)
    assert [ln.split("\t")[1] for ln in lines[1:]] == ["145", "257"]


def test_bad_inputs():
    with pytest.raises(ValueError):
        LlmCostSpec(0, 1, 1.0, 1)
    with pytest.raises(ValueError):
        cost_table([], VICUNA_7B)
    with pytest.raises(ValueError):
        estimate_cost(ConnectorConfig(), VICUNA_7B, 0)
