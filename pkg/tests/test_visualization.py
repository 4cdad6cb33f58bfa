import numpy as np
import pytest

from plncf.errors import PerplexityTooHigh
from plncf.visualization import (
    Projection2D,
    TsneConfig,
    conditional_affinities,
    cosine_distance_matrix,
    emit_grid_figure,
    emit_overlay_figure,
    emit_pair_figure,
    kl_divergence,
    kl_gradient,
    pairwise_affinities,
    tsne_project,
    write_coords,
)

FAST = dict(iterations=300, perplexity=5.0)


@pytest.fixture(scope="module")
def clustered():
    rng = np.random.default_rng(0)
    centers = rng.normal(size=(3, 10)) * 3
    X = np.vstack([c + rng.normal(size=(20, 10)) for c in centers])
    return X, np.repeat(np.arange(3), 20)


@pytest.fixture(scope="module")
def projection(clustered):
    X, labels = clustered
    return tsne_project(X, TsneConfig(rng_seed=1, **FAST), labels)


class TestAffinities:
    def test_perplexity_reached(self, clustered):
        _, bits = conditional_affinities(clustered[0], 10.0)
        np.testing.assert_allclose(2.0**bits, 10.0, atol=1e-3)

    def test_rows_stochastic_and_zero_diagonal(self, clustered):
        P, _ = conditional_affinities(clustered[0], 7.0)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
        assert not np.diag(P).any()

    def test_equidistant_uniform(self):
        # regular simplex vertices are pairwise equidistant
        X = np.eye(13)
        P, _ = conditional_affinities(X, 3.0)
        off = P[~np.eye(13, dtype=bool)].reshape(13, 12)
        np.testing.assert_allclose(off, 1 / 12, atol=1e-12)

    def test_joint_sums_to_one(self, clustered):
        P = pairwise_affinities(clustered[0], 8.0)
        assert P.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_array_equal(P, P.T)

    def test_cosine_distance(self):
        D = cosine_distance_matrix(np.array([[1.0, 0.0], [0.0, 2.0], [-3.0, 0.0]]))
        np.testing.assert_allclose(D, [[0, 1, 2], [1, 0, 1], [2, 1, 0]], atol=1e-15)

    def test_perplexity_too_high(self):
        with pytest.raises(PerplexityTooHigh):
            conditional_affinities(np.random.default_rng(0).normal(size=(10, 3)), 3.0)


class TestKL:
    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(2)
        P = rng.random((6, 6))
        np.fill_diagonal(P, 0.0)
        P = (P + P.T) / (P + P.T).sum()
        Y = rng.normal(size=(6, 2))
        g = kl_gradient(P, Y)
        h = 1e-6
        num = np.zeros_like(Y)
        for i in range(6):
            for d in range(2):
                E = np.zeros_like(Y)
                E[i, d] = h
                num[i, d] = (kl_divergence(P, Y + E) - kl_divergence(P, Y - E)) / (2 * h)
        rel = np.abs(num - g) / np.maximum(np.abs(num), 1e-6)
        assert rel.max() < 1e-3

    def test_non_negative(self):
        rng = np.random.default_rng(3)
        P = pairwise_affinities(rng.normal(size=(20, 5)), 4.0)
        for _ in range(10):
            assert kl_divergence(P, rng.normal(size=(20, 2))) >= 0.0


class TestProjection:
    def test_kl_decreases(self, projection):
        h = projection.kl_history
        assert h[-1] < h[0]
        assert len(h) == FAST["iterations"] + 1

    def test_post_exaggeration_monotone(self, projection):
        steps = np.diff(projection.kl_history[101:])
        assert steps.max() <= 1e-3

    def test_deterministic(self, clustered, projection):
        again = tsne_project(clustered[0], TsneConfig(rng_seed=1, **FAST), clustered[1])
        np.testing.assert_array_equal(again.coords, projection.coords)

    def test_seed_changes_layout(self, clustered, projection):
        other = tsne_project(clustered[0], TsneConfig(rng_seed=2, **FAST))
        assert not np.array_equal(other.coords, projection.coords)

    def test_duplicates_co_located(self, clustered):
        X = np.vstack([clustered[0], clustered[0][:5]])
        Y = tsne_project(X, TsneConfig(rng_seed=0, **FAST)).coords
        span = np.ptp(Y, axis=0).max()
        assert np.abs(Y[-5:] - Y[:5]).max() < 0.01 * span

    def test_clusters_stay_together(self, projection):
        Y, labels = projection.coords, projection.overlay_labels
        centroid = np.array([Y[labels == c].mean(axis=0) for c in range(3)])
        nearest = np.argmin(((Y[:, None, :] - centroid[None]) ** 2).sum(-1), axis=1)
        assert np.mean(nearest == labels) > 0.95

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TsneConfig(iterations=0)


class TestFigures:
    def test_overlay_legend(self, projection, tmp_path):
        names = emit_overlay_figure(projection, tmp_path / "f.svg", "users", caption="demo")
        assert names == ["cluster 0", "cluster 1", "cluster 2"]
        text = (tmp_path / "f.svg").read_text()
        assert text.startswith("<?xml") and "<svg" in text

    def test_svg_byte_stable(self, projection, tmp_path):
        emit_overlay_figure(projection, tmp_path / "a.svg", "users")
        emit_overlay_figure(projection, tmp_path / "b.svg", "users")
        assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()

    def test_pair_and_grid(self, projection, tmp_path):
        assert len(emit_pair_figure(projection, projection, tmp_path / "p.svg", ["a", "b"])) == 2
        assert len(emit_grid_figure([projection] * 4, tmp_path / "g.svg", list("abcd"))) == 4
        with pytest.raises(ValueError):
            emit_grid_figure([projection] * 3, tmp_path / "g.svg", list("abc"))

    def test_requires_labels(self, tmp_path):
        with pytest.raises(ValueError):
            emit_overlay_figure(Projection2D(np.zeros((4, 2))), tmp_path / "x.svg", "t")

    def test_coords_csv(self, projection, tmp_path):
        write_coords(projection, tmp_path / "tsne_coords.csv")
        lines = (tmp_path / "tsne_coords.csv").read_text().splitlines()
        assert lines[0] == "id,x,y,label" and len(lines) == 61
        i, x, y, lab = lines[1].split(",")
        assert int(i) == 0 and float(x) == projection.coords[0, 0] and int(lab) == projection.overlay_labels[0]
