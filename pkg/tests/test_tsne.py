import numpy as np
import pytest

from metarf.tsne import (
    TsneConfig,
    conditional_affinities,
    kl_divergence,
    kl_gradient,
    projection_affinities,
    symmetrize,
    tsne_embed,
)
from oracles import central_difference, kl, nn_purity, q_matrix, relative_error, row_perplexity


def three_clusters(seed: int, per: int = 20, dim: int = 50, sep: float = 10.0):
    rng = np.random.default_rng(seed)
    centres = np.zeros((3, dim))
    centres[1, 0] = sep
    centres[2, 1] = sep
    X = np.concatenate([c + rng.normal(size=(per, dim)) for c in centres])
    return X, np.repeat([0, 1, 2], per)


def test_equilateral_rows_are_uniform():
    # unit basis vectors: every squared distance is exactly 2
    P = conditional_affinities(np.eye(3), 1.5)
    expected = np.full((3, 3), 0.5)
    np.fill_diagonal(expected, 0.0)
    assert np.allclose(P, expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_rows_sum_to_one_and_match_perplexity(seed):
    X = np.random.default_rng(seed).normal(size=(10, 4))
    P = conditional_affinities(X, 5.0)
    assert np.all(np.abs(P.sum(axis=1) - 1.0) < 1e-9)
    assert np.all(np.diag(P) == 0) and np.all(P >= 0)
    for row in P:
        assert abs(row_perplexity(row) - 5.0) < 1e-4


def test_duplicate_points_get_a_uniform_row():
    X = np.zeros((4, 3))
    P = conditional_affinities(X, 2.0)
    assert np.allclose(P.sum(axis=1), 1.0)
    assert np.allclose(P[0, 1:], 1 / 3)


def test_affinity_preconditions():
    with pytest.raises(ValueError):
        conditional_affinities(np.zeros((2, 2)), 1.0)
    with pytest.raises(ValueError):
        conditional_affinities(np.random.default_rng(0).normal(size=(5, 2)), 5.0)


def test_symmetrize_two_points():
    P = symmetrize(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.array_equal(P, [[0.0, 0.5], [0.5, 0.0]])


def test_symmetrize_random():
    X = np.random.default_rng(3).normal(size=(8, 3))
    P = symmetrize(conditional_affinities(X, 3.0))
    assert np.array_equal(P, P.T)
    assert abs(P.sum() - 1.0) < 1e-12


def test_projection_affinity_cases():
    Q = projection_affinities(np.array([[0.0], [37.0]]))
    assert np.array_equal(Q, [[0.0, 0.5], [0.5, 0.0]])
    Z = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2]])
    Q = projection_affinities(Z)
    off = ~np.eye(3, dtype=bool)
    assert np.allclose(Q[off], 1 / 6, atol=1e-15)
    Z = np.random.default_rng(4).normal(size=(9, 2))
    assert np.max(np.abs(projection_affinities(Z) - q_matrix(Z))) < 1e-12


def test_kl_cases():
    X = np.random.default_rng(5).normal(size=(7, 3))
    P = symmetrize(conditional_affinities(X, 2.0))
    assert kl_divergence(P, P) == 0.0
    Q = projection_affinities(np.random.default_rng(6).normal(size=(7, 2)))
    assert kl_divergence(P, Q) >= 0
    assert abs(kl_divergence(P, Q) - kl(P, Q)) < 1e-12


def test_kl_hand_computed_three_points():
    P = np.array([[0.0, 0.2, 0.1], [0.2, 0.0, 0.2], [0.1, 0.2, 0.0]])
    Q = np.full((3, 3), 1 / 6)
    np.fill_diagonal(Q, 0.0)
    # 2 * (0.4 ln 1.2 + 0.1 ln 0.6), worked by hand
    assert abs(kl_divergence(P, Q) - 0.04369212068196) < 1e-10


def test_kl_rejects_zero_q():
    P = np.array([[0.0, 0.5], [0.5, 0.0]])
    with pytest.raises(ValueError):
        kl_divergence(P, np.zeros((2, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    P = symmetrize(conditional_affinities(rng.normal(size=(8, 5)), 3.0))
    Z = rng.normal(size=(8, 2))
    g = kl_gradient(P, Z)
    fd = central_difference(lambda z: kl(P, q_matrix(z.reshape(Z.shape))), Z.ravel()).reshape(Z.shape)
    assert relative_error(g, fd).max() < 1e-4


def test_embedding_reduces_kl_and_is_deterministic():
    X, _ = three_clusters(0)
    a = tsne_embed(X, TsneConfig(seed=1))
    assert a.kl_trace.shape == (1000,)
    assert a.kl_trace[-1] < a.kl_trace[0]
    assert np.all(np.isfinite(a.coords))
    b = tsne_embed(X, TsneConfig(seed=1))
    assert np.array_equal(a.coords, b.coords)
    c = tsne_embed(X, TsneConfig(seed=1, trace_kl=False))
    assert np.array_equal(a.coords, c.coords) and c.kl_trace.size == 0


@pytest.mark.parametrize("seed", range(3))
def test_clusters_separate(seed):
    X, labels = three_clusters(seed)
    Z = tsne_embed(X, TsneConfig(seed=seed, iterations=500)).coords
    assert nn_purity(Z, labels) >= 0.9


def test_config_validation_and_small_n_cap():
    with pytest.raises(ValueError):
        TsneConfig(perplexity=0.5)
    assert TsneConfig().effective_perplexity(10) == 3.0
    assert TsneConfig().effective_perplexity(1000) == 30.0
    with pytest.raises(ValueError):
        tsne_embed(np.zeros((2, 2)))
