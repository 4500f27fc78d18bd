import numpy as np
import pytest

from acformer.connector import (
    AggregatorWeights,
    ConnectorConfig,
    acformer_backward,
    acformer_forward,
    acformer_forward_cached,
    aggregator_layer,
    build_lm_input,
    decode_weights,
    encode_weights,
    expected_shapes,
    init_weights,
    load_weights,
    make_toy_dataset,
    save_weights,
    toy_train,
)
from acformer.errors import ConfigError, DataError, ShapeError, UsageError
from acformer.gradcheck import TINY_CONFIG, connector_gradcheck
from acformer.kernel import Rng
from acformer.selector import select_anchors
from acformer.synth import synthesize

from oracles import naive_aggregator_layer

SMALL = ConnectorConfig(
    layers=2, model_dim=16, heads=2, head_dim=8, ff_dim=32, out_dim=8,
    feature_dim=12, token_budget=5,
)


def random_layer(dm, ff, rng, std=0.3):
    lw = {
        "ln1.gain": 1 + rng.normal((dm,), 0.1), "ln1.bias": rng.normal((dm,), 0.1),
        "ln2.gain": 1 + rng.normal((dm,), 0.1), "ln2.bias": rng.normal((dm,), 0.1),
        "ff.w1": rng.normal((dm, ff), std), "ff.b1": rng.normal((ff,), 0.1),
        "ff.w2": rng.normal((ff, dm), std), "ff.b2": rng.normal((dm,), 0.1),
    }
    for p in "qkvo":
        lw[f"attn.w{p}"] = rng.normal((dm, dm), std)
        lw[f"attn.b{p}"] = rng.normal((dm,), 0.1)
    return lw


def sample_pair(cfg, n_tokens=20, heads=2, seed=0):
    s = synthesize(seed, n_tokens, cfg.feature_dim, heads)
    return s.features, s.attn


def test_config_validation():
    with pytest.raises(ConfigError):
        ConnectorConfig(model_dim=10, heads=3, head_dim=3)
    with pytest.raises(ConfigError):
        ConnectorConfig(token_budget=0)
    with pytest.raises(ConfigError):
        ConnectorConfig(variant="qformer")


def test_weight_shapes_and_names():
    w = init_weights(SMALL)
    assert list(w) == list(expected_shapes(SMALL))
    w.check(SMALL)
    assert w["layers.1.attn.wo"].shape == (16, 16)
    assert "queries" not in w
    bank = init_weights(ConnectorConfig(**{**SMALL.to_dict(), "variant": "pr"}))
    assert bank["queries"].shape == (5, 16)


def test_zero_residual_layer_is_identity():
    rng = Rng(1)
    lw = random_layer(16, 32, rng)
    lw["attn.wo"][:] = 0
    lw["attn.bo"][:] = 0
    lw["ff.w2"][:] = 0
    lw["ff.b2"][:] = 0
    ia = rng.normal((4, 16))
    rv = rng.normal((9, 16))
    assert np.array_equal(aggregator_layer(ia, rv, lw, 2), ia)


def test_layer_matches_naive_oracle():
    rng = Rng(2)
    lw = random_layer(8, 12, rng)
    ia = rng.normal((3, 8))
    rv = rng.normal((9, 8))
    ref = naive_aggregator_layer(ia, rv, lw, 2)
    assert np.max(np.abs(aggregator_layer(ia, rv, lw, 2) - ref)) <= 1e-10


def test_kv_permutation_invariance():
    rng = Rng(3)
    lw = random_layer(16, 32, rng)
    ia = rng.normal((5, 16))
    rv = rng.normal((30, 16))
    perm = np.random.default_rng(3).permutation(30)
    diff = aggregator_layer(ia, rv, lw, 2) - aggregator_layer(ia, rv[perm], lw, 2)
    assert np.max(np.abs(diff)) <= 1e-12


def test_layer_width_mismatch():
    rng = Rng(4)
    lw = random_layer(8, 12, rng)
    with pytest.raises(ShapeError):
        aggregator_layer(rng.normal((2, 8)), rng.normal((3, 6)), lw, 2)


def test_output_rows_match_budget():
    f, a = sample_pair(SMALL)
    for budget in (1, 2, 5, 20):
        cfg = ConnectorConfig(**{**SMALL.to_dict(), "token_budget": budget})
        assert acformer_forward(f, a, cfg, init_weights(cfg)).shape == (budget, 8)


def test_full_size_budget_145():
    cfg = ConnectorConfig(layers=1, out_dim=64)
    s = synthesize(0, 577, cfg.feature_dim, 16)
    out = acformer_forward(s.features, s.attn, cfg, init_weights(cfg))
    assert out.shape == (145, 64)


def test_budget_too_large():
    f, a = sample_pair(SMALL)
    cfg = ConnectorConfig(**{**SMALL.to_dict(), "token_budget": 21})
    with pytest.raises(ConfigError):
        acformer_forward(f, a, cfg, init_weights(cfg))


def test_attention_feature_mismatch():
    f, a = sample_pair(SMALL)
    with pytest.raises(ShapeError):
        acformer_forward(f[:-1], a, SMALL, init_weights(SMALL))
    with pytest.raises(ShapeError):
        acformer_forward(f[:, :-1], a, SMALL, init_weights(SMALL))


def test_selection_ignores_feature_scale():
    f, a = sample_pair(SMALL)
    _, c1 = acformer_forward_cached(f, a, SMALL, init_weights(SMALL))
    _, c2 = acformer_forward_cached(2 * f, a, SMALL, init_weights(SMALL))
    assert c1.anchors == c2.anchors == select_anchors(a, SMALL.t_n)


def test_lm_input_concatenation():
    v = np.ones((145, 6))
    t = np.zeros((32, 6))
    m = build_lm_input(v, t)
    assert m.concatenated.shape == (177, 6)
    sv, st = m.split()
    assert np.array_equal(sv, v) and np.array_equal(st, t)
    assert build_lm_input(v, []).concatenated.shape == (145, 6)
    with pytest.raises(ShapeError):
        build_lm_input(v, np.zeros((2, 5)))


def test_zero_upstream_gives_zero_grads():
    f, a = sample_pair(SMALL)
    out, cache = acformer_forward_cached(f, a, SMALL, init_weights(SMALL, std=0.3, zero_init_residual=False))
    g = acformer_backward(np.zeros_like(out), cache)
    assert all(not np.any(v) for v in g.params.values())
    assert not np.any(g.features)


def test_backward_without_cache():
    with pytest.raises(UsageError):
        acformer_backward(np.zeros((5, 8)), None)


def test_gradcheck_tiny_config():
    report = connector_gradcheck(n_probes=300)
    assert report.probes >= 300
    assert report.max_rel_err <= 1e-4


def test_path_ablation_isolates_selected_rows():
    f, a = sample_pair(SMALL)
    w = init_weights(SMALL, std=0.3, zero_init_residual=False)
    for i in range(SMALL.layers):
        w[f"layers.{i}.attn.wk"] = np.zeros((16, 16))
        w[f"layers.{i}.attn.wv"] = np.zeros((16, 16))
    out, cache = acformer_forward_cached(f, a, SMALL, w)
    g = acformer_backward(Rng(0).normal(out.shape), cache)
    chosen = np.zeros(f.shape[0], dtype=bool)
    chosen[cache.anchors] = True
    assert not np.any(g.features_query[~chosen])
    assert np.all(np.abs(g.features_query[chosen]).sum(axis=1) > 0)
    # with Wk = Wv = 0 the kv path carries nothing back to the features
    assert not np.any(g.features[~chosen])


def test_checkpoint_round_trip(tmp_path):
    w = init_weights(SMALL, seed=7)
    blob = encode_weights(w)
    assert encode_weights(decode_weights(blob)) == blob
    path = tmp_path / "w.acfw"
    save_weights(w, path)
    assert path.read_bytes() == blob
    back = load_weights(path)
    f, a = sample_pair(SMALL)
    assert np.array_equal(acformer_forward(f, a, SMALL, w), acformer_forward(f, a, SMALL, back))


def test_checkpoint_errors(tmp_path):
    blob = encode_weights(init_weights(SMALL))
    with pytest.raises(DataError):
        decode_weights(b"XXXX" + blob[4:])
    with pytest.raises(DataError):
        decode_weights(blob[:-3])
    with pytest.raises(ShapeError):
        init_weights(SMALL).check(ConnectorConfig(**{**SMALL.to_dict(), "layers": 3}))


def test_weights_container():
    w = init_weights(SMALL)
    c = w.copy()
    c["adapter.b"] = np.ones(16)
    assert not np.any(w["adapter.b"])
    assert w.num_parameters() == sum(v.size for _, v in w.items())
    assert set(w.group("layers.0.")) == {k[len("layers.0."):] for k in w if k.startswith("layers.0.")}
    assert isinstance(c, AggregatorWeights)


def test_toy_train_zero_lr_is_flat():
    data = make_toy_dataset(TINY_CONFIG, 4, 10, 2, seed=0)
    res = toy_train(TINY_CONFIG, data, steps=5, lr=0.0)
    assert len(res.losses) == 6
    assert len(set(res.losses)) == 1


def test_toy_train_deterministic_and_decreasing():
    data = make_toy_dataset(TINY_CONFIG, 4, 10, 2, seed=1)
    r1 = toy_train(TINY_CONFIG, data, steps=30, lr=0.3, seed=1)
    r2 = toy_train(TINY_CONFIG, make_toy_dataset(TINY_CONFIG, 4, 10, 2, seed=1), steps=30, lr=0.3, seed=1)
    assert r1.losses == r2.losses
    assert r1.losses[-1] < r1.losses[0]


def test_toy_dataset_targets_follow_anchors():
    data = make_toy_dataset(TINY_CONFIG, 3, 10, 2, seed=2)
    for s in data:
        assert select_anchors(s.attn, TINY_CONFIG.t_n)[0] == 0
        assert sorted(select_anchors(s.attn, TINY_CONFIG.t_n)) == sorted(s.anchors)
