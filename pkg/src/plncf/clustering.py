"""Spherical k-means, cosine silhouette and optimal-k selection."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MissingCell, SingleCluster, TooFewPoints
from .evaluation import mean_std
from .models import ARCHS, PL_ARCHS, display_name

K_GRID = (3, 4, 5, 6, 7, 8, 10)
RESTARTS = 10
MAX_ITER = 300
NORM_EPS = 1e-8
ENTITIES = ("user", "group")
REPRESENTATIONS = ("main", "pl")


def l2_normalize(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(X, axis=1, keepdims=True), NORM_EPS)
    return X / norms


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int = 0
    history: list = field(default_factory=list)


def _kmeanspp(Xn: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding with cosine distance in place of squared Euclidean."""
    n = Xn.shape[0]
    chosen = [int(rng.integers(n))]
    closest = np.maximum(1.0 - Xn @ Xn[chosen[0]], 0.0)
    for _ in range(1, k):
        weights = closest**2
        total = weights.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(remaining))
        else:
            idx = int(rng.choice(n, p=weights / total))
        chosen.append(idx)
        closest = np.minimum(closest, np.maximum(1.0 - Xn @ Xn[idx], 0.0))
    return Xn[chosen].copy()


def _repair_empty(Xn, labels, sims, centroids, k):
    # move the point farthest from its centroid (taken from a cluster with >= 2 members)
    while True:
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return labels
        movable = counts[labels] >= 2
        dist = np.where(movable, 1.0 - sims[np.arange(len(labels)), labels], -np.inf)
        i = int(np.argmax(dist))
        labels[i] = empty[0]
        centroids[empty[0]] = Xn[i]
        sims[i, empty[0]] = 1.0


def _update_centroids(Xn, labels, k, old):
    sums = np.zeros((k, Xn.shape[1]))
    np.add.at(sums, labels, Xn)
    norms = np.linalg.norm(sums, axis=1)
    out = old.copy()
    ok = norms > NORM_EPS
    out[ok] = sums[ok] / norms[ok, None]
    return out


def _inertia(Xn, labels, centroids) -> float:
    return float(np.sum(1.0 - np.sum(Xn * centroids[labels], axis=1)))


def _lloyd(Xn, centroids, k, max_iter):
    labels_prev = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        sims = Xn @ centroids.T
        labels = np.argmax(sims, axis=1)
        labels = _repair_empty(Xn, labels, sims, centroids, k)
        centroids = _update_centroids(Xn, labels, k, centroids)
        history.append(_inertia(Xn, labels, centroids))
        if labels_prev is not None and np.array_equal(labels, labels_prev):
            break
        labels_prev = labels
    return labels, centroids, history, it


def spherical_kmeans(embeddings, k: int, rng_seed=0, restarts: int = RESTARTS,
                     max_iter: int = MAX_ITER) -> ClusterAssignment:
    """k-means on unit-normalized rows with cosine assignment.

    Runs ``restarts`` k-means++ seeded fits and keeps the one with the lowest
    inertia (sum of 1 - cos to the assigned centroid).
    """
    Xn = l2_normalize(embeddings)
    n = Xn.shape[0]
    if k < 1 or n < k:
        raise TooFewPoints(f"cannot form {k} clusters from {n} points")
    rng = np.random.default_rng(rng_seed)
    best = None
    for _ in range(restarts):
        labels, centroids, history, n_iter = _lloyd(Xn, _kmeanspp(Xn, k, rng), k, max_iter)
        if best is None or history[-1] < best.inertia:
            best = ClusterAssignment(labels, centroids, history[-1], n_iter, history)
    return best


def cosine_silhouette(embeddings, labels) -> float:
    """Mean silhouette with d(a, b) = 1 - cos(a, b) in the embedding's own dimension.

    Points in singleton clusters score 0.
    """
    Xn = l2_normalize(embeddings)
    labels = np.asarray(labels)
    uniq, lab = np.unique(labels, return_inverse=True)
    if uniq.size < 2:
        raise SingleCluster("silhouette needs at least two clusters")
    n = Xn.shape[0]
    D = 1.0 - Xn @ Xn.T
    np.fill_diagonal(D, 0.0)
    onehot = np.zeros((n, uniq.size))
    onehot[np.arange(n), lab] = 1.0
    sizes = onehot.sum(axis=0)
    S = D @ onehot
    own_size = sizes[lab]
    a = np.where(own_size > 1, S[np.arange(n), lab] / np.maximum(own_size - 1, 1), 0.0)
    mean_other = S / sizes
    mean_other[np.arange(n), lab] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own_size > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


@dataclass
class SilhouetteGrid:
    scores: dict
    chosen_k: int
    chosen_score: float
    labels: dict = field(default_factory=dict)

    @property
    def chosen_labels(self) -> np.ndarray:
        return self.labels[self.chosen_k]


def optimal_k_scan(embeddings, k_grid=K_GRID, rng_seed: int = 0, restarts: int = RESTARTS) -> SilhouetteGrid:
    """Silhouette for each k in the grid; the best k wins, ties go to the smaller k."""
    X = np.asarray(embeddings, dtype=np.float64)
    k_grid = sorted(k_grid)
    if X.shape[0] <= max(k_grid):
        raise TooFewPoints(f"{X.shape[0]} points for k up to {max(k_grid)}")
    scores, labels = {}, {}
    for k in k_grid:
        fit = spherical_kmeans(X, k, rng_seed=[int(rng_seed), k], restarts=restarts)
        labels[k] = fit.labels
        scores[k] = cosine_silhouette(X, fit.labels)
    chosen = k_grid[0]
    for k in k_grid[1:]:
        if scores[k] > scores[chosen]:
            chosen = k
    return SilhouetteGrid(scores, chosen, scores[chosen], labels)


@dataclass
class ClusterReport:
    model: str
    seed: int
    entity: str
    representation: str
    grid: SilhouetteGrid

    def to_dict(self) -> dict:
        return dict(
            model=self.model, seed=self.seed, entity=self.entity, representation=self.representation,
            scores={str(k): v for k, v in self.grid.scores.items()},
            chosen_k=self.grid.chosen_k, chosen_score=self.grid.chosen_score,
            chosen_labels=[int(v) for v in self.grid.chosen_labels],
        )

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterReport":
        scores = {int(k): float(v) for k, v in data["scores"].items()}
        chosen_k = int(data["chosen_k"])
        grid = SilhouetteGrid(scores, chosen_k, float(data["chosen_score"]),
                              {chosen_k: np.array(data["chosen_labels"], dtype=int)})
        return cls(data["model"], int(data["seed"]), data["entity"], data["representation"], grid)


def save_cluster_report(report: ClusterReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n")


def load_cluster_report(path) -> ClusterReport:
    return ClusterReport.from_dict(json.loads(Path(path).read_text()))


TABLE3_COLUMNS = (("user", "main"), ("user", "pl"), ("group", "main"), ("group", "pl"))


def build_table3(reports, models=ARCHS) -> list:
    """Rows of (model, user-main, user-PL, group-main, group-PL) mean ± std strings.

    Baselines have no PL embeddings and show "--" there.
    """
    cells = {}
    for rep in reports:
        cells.setdefault((rep.model, rep.entity, rep.representation), []).append(rep.grid.chosen_score)
    rows = [["Model", "User Main", "User PL", "Group Main", "Group PL"]]
    for arch in models:
        row = [display_name(arch)]
        for entity, rep in TABLE3_COLUMNS:
            if rep == "pl" and arch not in PL_ARCHS:
                row.append("--")
                continue
            vals = cells.get((arch, entity, rep))
            if not vals:
                raise MissingCell(f"no silhouette reports for {arch} {entity} {rep}")
            mean, std = mean_std(vals)
            row.append(f"{mean:.4f} ± {std:.4f}")
        rows.append(row)
    return rows


def write_table(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
