import numpy as np
import pytest

from acformer.analysis import (
    anchor_overlap,
    decode_ppm,
    encode_ppm,
    normalize_channel,
    overlap_ratio,
    pca3,
    render_attention_heatmap,
    render_feature_rgb,
    salient_tokens,
    write_ppm,
)
from acformer.errors import DataError
from acformer.kernel import Rng
from acformer.tensorfile import tensor_hash

from oracles import eig_top3


def test_rank_one_data():
    rng = Rng(0)
    u = rng.normal((20, 1))
    v = np.array([[3.0, 0.0, 4.0, 0.0]]) / 5
    p = pca3(u @ v)
    assert np.allclose(p.components[0], v[0], atol=1e-12)
    assert p.explained_variance[0] > 0
    assert np.all(p.explained_variance[1:] == 0)
    assert not np.any(p.components[1:])
    assert p.degenerate


def test_identical_rows_are_fully_degenerate():
    p = pca3(np.tile([1.0, 2.0, 3.0, 4.0], (9, 1)))
    assert p.degenerate
    assert not np.any(p.explained_variance)
    assert not np.any(p.projected)


def test_matches_dense_eig_oracle():
    x = Rng(1).normal((64, 16)) * np.linspace(3, 0.5, 16)
    p = pca3(x)
    vals, vecs = eig_top3(x)
    assert np.max(np.abs(p.explained_variance - vals)) <= 1e-8
    assert np.max(np.abs(p.components - vecs)) <= 1e-8
    assert not p.degenerate


def test_score_moments():
    x = Rng(2).normal((40, 8))
    p = pca3(x)
    assert np.allclose(p.projected.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(p.projected.var(axis=0, ddof=1), p.explained_variance, rtol=1e-10)
    assert np.allclose(p.components @ p.components.T, np.eye(3), atol=1e-12)


def test_shift_invariance():
    x = Rng(3).normal((30, 6))
    a, b = pca3(x), pca3(x + 5.0)
    assert np.allclose(a.projected, b.projected, atol=1e-10)


def test_pca_too_small():
    with pytest.raises(DataError):
        pca3(np.zeros((2, 5)))


def test_normalize_channel():
    assert not np.any(normalize_channel([4.0, 4.0, 4.0]))
    out = normalize_channel([0.0, 0.5, 1.0, 0.25])
    assert out.tolist() == [0, 128, 255, 64]


def test_rgb_layout_two_by_two():
    x = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 3], [1, 1, 1]])
    img = render_feature_rgb(pca3(x[:4]))
    assert img.shape == (2, 2, 3)
    assert img.dtype == np.uint8
    assert {0, 255} <= set(np.unique(img))
    with pytest.raises(DataError):
        render_feature_rgb(pca3(x))


def test_heatmap_one_hot_and_uniform():
    a = np.zeros((2, 9))
    a[0, 4] = 1.0
    a[1] = 1 / 9
    one = render_attention_heatmap(a, 0)
    assert one[1, 1].tolist() == [255, 255, 255]
    assert one.sum() == 255 * 3
    assert not np.any(render_attention_heatmap(a, 1))
    mean = render_attention_heatmap(a)
    assert mean[1, 1, 0] == 255 and mean[0, 0, 0] == 0


def test_heatmap_affine_invariant():
    a = Rng(4).uniform((3, 16))
    assert np.array_equal(render_attention_heatmap(a, 1), render_attention_heatmap(3 * a + 0.5, 1))


def test_heatmap_bad_head():
    with pytest.raises(DataError):
        render_attention_heatmap(np.ones((2, 4)), 2)


def test_ppm_round_trip(tmp_path):
    img = Rng(5).integers(0, 256, (3, 3, 3)).astype(np.uint8)
    back, comment = decode_ppm(encode_ppm(img))
    assert np.array_equal(back, img) and comment == ""
    h = tensor_hash(np.ones(3))
    path = tmp_path / "x.ppm"
    write_ppm(path, img, source_hash=h, scale=2)
    back, comment = decode_ppm(path.read_bytes())
    assert comment == f"source-sha256 {h}"
    assert np.array_equal(back, img.repeat(2, 0).repeat(2, 1))
    assert path.read_bytes().startswith(b"P6\n")


def test_overlap_cases():
    assert overlap_ratio({1, 2, 3}, {3, 2, 1}) == 1.0
    assert overlap_ratio({1, 2}, {3, 4}) == 0.0
    assert overlap_ratio({1, 2, 3, 4}, {2, 3, 4, 9}) == 0.75
    with pytest.raises(DataError):
        overlap_ratio(set(), {1})


def test_salient_tokens_use_sequence_indices():
    a = np.array([[0.1, 0.7, 0.2], [0.1, 0.5, 0.4]])
    assert salient_tokens(a, 2) == {2, 3}


def test_anchor_overlap_report():
    rng = Rng(6)
    f = rng.normal((17, 6))
    a = rng.uniform((2, 16))
    r = anchor_overlap(f, a, 4)
    assert r["k"] == 4 and len(r["activated"]) == 4
    assert 0.0 <= r["ratio"] <= 1.0
