from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radar_perceive.analysis import (FeatureSet, TsneConfig, conditional_p, extract_features, joint_p,
                                     kl_divergence, kl_gradient, plot_embedding, read_ppm, tsne,
                                     write_embedding_csv)
from radar_perceive.augment import Chip
from radar_perceive.errors import ArchitectureError, InvalidInputError
from radar_perceive.imaging import CartesianImage
from radar_perceive.nn.network import conv, init_weights, maxpool, relu, softmax


def linearly_separable(a: np.ndarray, b: np.ndarray) -> bool:
    """Exact 2-D test: the sets separate along some direction, and the
    candidate directions only change order at normals of pairwise
    differences, so probing between consecutive critical angles suffices."""
    pts = np.concatenate([a, b])
    diff = pts[:, None, :] - pts[None, :, :]
    crit = np.arctan2(diff[..., 1], diff[..., 0]).ravel() + math.pi / 2
    crit = np.unique(np.mod(crit, math.pi))
    probes = np.concatenate([(crit[:-1] + crit[1:]) / 2, [(crit[-1] + crit[0] + math.pi) / 2]])
    dirs = np.stack([np.cos(probes), np.sin(probes)], axis=1)
    pa, pb = a @ dirs.T, b @ dirs.T
    return bool(np.any((pa.max(axis=0) < pb.min(axis=0)) | (pb.max(axis=0) < pa.min(axis=0))))


def test_separability_oracle():
    a = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert linearly_separable(a, a + 5)
    # XOR layout is not separable
    assert not linearly_separable(np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]))


# -- affinities --------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.integers(5, 25), st.integers(0, 10_000))
def test_conditional_rows_are_distributions(n, seed):
    x = np.random.default_rng(seed).standard_normal((n, 3))
    perp = min(5.0, n - 1.5)
    cond = conditional_p(x, perp)
    np.testing.assert_allclose(cond.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(np.diag(cond) == 0)
    rows = np.where(cond > 0, cond, 1.0)
    entropy = -np.sum(cond * np.log(rows), axis=1)
    np.testing.assert_allclose(entropy, math.log(perp), atol=1e-5)
    p = joint_p(x, perp)
    np.testing.assert_array_equal(p, p.T)


def test_infeasible_perplexity():
    x = np.random.default_rng(0).standard_normal((10, 2))
    with pytest.raises(InvalidInputError):
        conditional_p(x, 10.0)
    with pytest.raises(InvalidInputError):
        tsne(x, TsneConfig(perplexity=30))
    with pytest.raises(InvalidInputError):
        tsne(x[:3], TsneConfig(perplexity=1.5))
    with pytest.raises(InvalidInputError):
        TsneConfig(iterations=0)


def test_gradient_matches_finite_differences():
    g = np.random.default_rng(1)
    for trial in range(10):
        n = int(g.integers(4, 11))
        x = g.standard_normal((n, 4))
        p = joint_p(x, min(3.0, n - 1.5))
        y = g.standard_normal((n, 2))
        ana = kl_gradient(p, y)
        h = 1e-6
        for i in range(n):
            for d in range(2):
                up, down = y.copy(), y.copy()
                up[i, d] += h
                down[i, d] -= h
                num = (kl_divergence(p, up) - kl_divergence(p, down)) / (2 * h)
                assert abs(ana[i, d] - num) <= 1e-4 * max(abs(num), abs(ana[i, d]), 1e-3)


# -- embedding ---------------------------------------------------------------

def blobs(seed: int, n: int = 100, d: int = 10, gap: float = 10.0):
    g = np.random.default_rng(seed)
    x = g.standard_normal((n, d))
    labels = np.repeat([0, 1], n // 2)
    x[labels == 1, 0] += gap
    return FeatureSet(x, labels)


def test_two_blobs_separable_over_seeds():
    wins = 0
    for seed in range(10):
        f = blobs(100 + seed)
        res = tsne(f, TsneConfig(seed=seed))
        emb = res.embedding
        wins += linearly_separable(emb[f.labels == 0], emb[f.labels == 1])
    assert wins >= 9


def test_kl_reported_and_decreasing():
    res = tsne(blobs(3), TsneConfig(seed=3))
    assert 0.0 <= res.kl <= res.kl_after_exaggeration
    assert res.kl == pytest.approx(kl_divergence(joint_p(blobs(3).matrix, 30.0), res.embedding))
    assert res.embedding.shape == (100, 2)


def test_duplicates_stay_together():
    n, k_dup = 200, 10
    for seed in range(10):
        g = np.random.default_rng(seed)
        base = g.standard_normal((n, 5))
        x = np.concatenate([base, base[:k_dup]])
        emb = tsne(x, TsneConfig(seed=seed)).embedding
        d = np.linalg.norm(emb[:, None] - emb[None], axis=-1)
        for k in range(k_dup):
            others = [j for j in range(n + k_dup) if j not in (k, n + k)]
            assert d[k, n + k] < d[k, others].min()


def test_tsne_deterministic_and_label_free():
    f = blobs(7, n=40)
    a = tsne(f, TsneConfig(perplexity=10, iterations=200, seed=4))
    b = tsne(FeatureSet(f.matrix, 1 - f.labels), TsneConfig(perplexity=10, iterations=200, seed=4))
    assert a.embedding.tobytes() == b.embedding.tobytes()
    c = tsne(f, TsneConfig(perplexity=10, iterations=200, seed=5))
    assert not np.array_equal(a.embedding, c.embedding)


# -- features ----------------------------------------------------------------

def small_net(zero: bool = False):
    layers = [conv(3, 3), relu(), maxpool(2), conv(4, 3), softmax()]
    net = init_weights(layers, np.random.default_rng(0), (8, 8, 1))
    if zero:
        for p in net.params:
            p.weights[...] = 0
            p.bias[...] = 0
    return net


def chip(values, label=0):
    return Chip(image=CartesianImage(values=np.asarray(values, dtype=np.float64), cell_size=1.0), label=label)


def test_extract_features_rows():
    g = np.random.default_rng(2)
    img = g.random((8, 8))
    chips = [chip(img, 0), chip(img, 1), chip(g.random((8, 8)), 2)]
    f = extract_features(small_net(), chips)
    assert f.matrix.shape == (3, 3 * 3 * 3)
    np.testing.assert_array_equal(f.matrix[0], f.matrix[1])
    assert f.labels.tolist() == [0, 1, 2]
    assert not np.array_equal(f.matrix[0], f.matrix[2])
    assert not extract_features(small_net(zero=True), chips).matrix.any()


def test_extract_features_needs_two_convs():
    net = init_weights([conv(2, 8), softmax()], np.random.default_rng(0), (8, 8, 1))
    with pytest.raises(ArchitectureError):
        extract_features(net, [chip(np.ones((8, 8)))])


def test_featureset_validation():
    with pytest.raises(InvalidInputError):
        FeatureSet(np.array([[np.nan, 1.0]]), [0])
    with pytest.raises(InvalidInputError):
        FeatureSet(np.zeros((2, 2)), [0])


# -- output ------------------------------------------------------------------

def test_plot_embedding(tmp_path):
    g = np.random.default_rng(0)
    emb = g.standard_normal((30, 2))
    labels = np.repeat([0, 3, 5], 10)
    info = plot_embedding(emb, labels, tmp_path / "p.ppm")
    assert (tmp_path / "p.ppm").stat().st_size > 0
    assert len(info.colors) == 3 and len(set(info.colors.values())) == 3
    x0, x1, y0, y1 = info.bounds
    assert x0 <= emb[:, 0].min() and emb[:, 0].max() <= x1
    assert y0 <= emb[:, 1].min() and emb[:, 1].max() <= y1
    pixels = read_ppm(tmp_path / "p.ppm")
    assert pixels.shape == (512, 512, 3)
    present = {tuple(v) for v in pixels.reshape(-1, 3).tolist()}
    assert set(info.colors.values()) <= present
    with pytest.raises(InvalidInputError):
        plot_embedding(emb, labels[:5], tmp_path / "q.ppm")


def test_embedding_csv(tmp_path):
    emb = np.array([[0.5, -1.25], [2.0, 3.0]])
    write_embedding_csv(emb, [1, 4], tmp_path / "e.csv")
    rows = list(csv.reader((tmp_path / "e.csv").open()))
    assert rows[0] == ["sample_id", "x", "y", "label"]
    assert rows[1] == ["0", "0.5", "-1.25", "1"] and rows[2][3] == "4"
