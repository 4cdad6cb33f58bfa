"""Exact t-SNE on cosine distances and static cluster-overlay figures.

Cluster labels always come from the high-dimensional clustering; the 2-D
coordinates are only a canvas for them.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from matplotlib import rc_context
from matplotlib.figure import Figure

from .clustering import l2_normalize
from .errors import PerplexityTooHigh

MIN_PROB = 1e-12


@dataclass
class TsneConfig:
    perplexity: float = 15.0
    iterations: int = 1000
    learning_rate: float | None = None   # None: max(N / (4 * early_exaggeration), 50)
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 100
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    rng_seed: int = 0
    # after exaggeration, reject steps that raise KL and retry with a halved plain step
    monotone_guard: bool = True

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.perplexity <= 0:
            raise ValueError("perplexity must be positive")


@dataclass
class Projection2D:
    coords: np.ndarray
    overlay_labels: np.ndarray | None = None
    kl_history: list = field(default_factory=list)


def cosine_distance_matrix(X) -> np.ndarray:
    Xn = l2_normalize(X)
    D = np.maximum(1.0 - Xn @ Xn.T, 0.0)
    np.fill_diagonal(D, 0.0)
    return D


def _row_conditional(d: np.ndarray, target_entropy: float, tol: float, max_iter: int):
    """Bisect the Gaussian precision so the row's entropy (nats) hits the target."""
    shifted = d - d.min()
    beta, lo, hi = 1.0, 0.0, np.inf
    p = entropy = None
    for _ in range(max_iter):
        w = np.exp(-beta * shifted)
        p = w / w.sum()
        nz = p > 0
        entropy = float(-np.sum(p[nz] * np.log(p[nz])))
        diff = entropy - target_entropy
        if abs(diff) < tol:
            break
        if diff > 0:
            lo = beta
            beta = beta * 2.0 if hi == np.inf else (lo + hi) / 2.0
        else:
            hi = beta
            beta = (lo + hi) / 2.0
    return p, entropy


def conditional_affinities(embeddings, perplexity: float, tol: float = 1e-10, max_iter: int = 200):
    """Row-stochastic p(j|i) over cosine distances, one bandwidth per row.

    Returns (conditional matrix, per-row entropies in bits).
    """
    D = cosine_distance_matrix(embeddings)
    n = D.shape[0]
    if n < 4:
        raise ValueError("need at least 4 points")
    if perplexity >= (n - 1) / 3.0:
        raise PerplexityTooHigh(f"perplexity {perplexity} must be below (N - 1) / 3 = {(n - 1) / 3:.2f}")
    target = np.log(perplexity)
    P = np.zeros((n, n))
    entropies = np.zeros(n)
    for i in range(n):
        others = np.r_[0:i, i + 1:n]
        row, h = _row_conditional(D[i, others], target, tol, max_iter)
        P[i, others] = row
        entropies[i] = h / np.log(2.0)
    return P, entropies


def pairwise_affinities(embeddings, perplexity: float) -> np.ndarray:
    """Symmetrized joint affinities (p(j|i) + p(i|j)) / 2N, summing to 1."""
    P, _ = conditional_affinities(embeddings, perplexity)
    return (P + P.T) / (2.0 * P.shape[0])


def _student_t(Y: np.ndarray):
    sq = np.sum(Y * Y, axis=1)
    num = 1.0 / (1.0 + sq[:, None] + sq[None, :] - 2.0 * Y @ Y.T)
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), MIN_PROB)
    return Q, num


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    Q, _ = _student_t(Y)
    Pc = np.maximum(P, MIN_PROB)
    mask = ~np.eye(P.shape[0], dtype=bool)
    return float(np.sum(Pc[mask] * np.log(Pc[mask] / Q[mask])))


def kl_gradient(P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """d KL(P || Q) / d Y for Student-t Q."""
    Q, num = _student_t(Y)
    W = (np.maximum(P, MIN_PROB) - Q) * num
    np.fill_diagonal(W, 0.0)
    return 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)


def _backtrack(P, Y, grad, lr, kl_prev, max_halvings: int = 40):
    step = lr
    for _ in range(max_halvings):
        Y_try = Y - step * grad
        Y_try -= Y_try.mean(axis=0)
        kl = kl_divergence(P, Y_try)
        if kl <= kl_prev:
            return Y_try, kl
        step *= 0.5
    return Y, kl_prev


def tsne_project(embeddings, config: TsneConfig | None = None, labels=None) -> Projection2D:
    """Exact t-SNE of l2-normalized rows to 2-D.

    Gradient descent with early exaggeration, a momentum switch and per-
    coordinate adaptive gains.  ``kl_history`` holds the un-exaggerated
    KL(P || Q) before the first step and after every step.  With
    ``monotone_guard`` the post-exaggeration history never increases.

    Identical rows are projected once and share a coordinate.
    """
    config = config or TsneConfig()
    X = l2_normalize(embeddings)
    if X.shape[0] > 5000:
        raise ValueError("exact t-SNE is limited to 5000 points")
    _, first, inverse = np.unique(X, axis=0, return_index=True, return_inverse=True)
    keep = np.sort(first)
    slot = np.empty(X.shape[0], dtype=int)
    slot[keep] = np.arange(keep.size)
    # map every row to the position of its first occurrence among the kept rows
    rows = slot[first[np.ravel(inverse)]]
    X = X[keep]
    lr = config.learning_rate or max(X.shape[0] / (4.0 * config.early_exaggeration), 50.0)
    P = pairwise_affinities(X, config.perplexity)
    rng = np.random.default_rng(config.rng_seed)
    Y = rng.normal(0.0, 1e-4, size=(X.shape[0], 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    history = [kl_divergence(P, Y)]
    for it in range(config.iterations):
        exag = config.early_exaggeration if it < config.exaggeration_iters else 1.0
        mom = config.momentum if it < config.momentum_switch else config.final_momentum
        grad = kl_gradient(exag * P, Y)
        same_sign = np.sign(grad) == np.sign(update)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = mom * update - lr * gains * grad
        Y_new = Y + update
        Y_new -= Y_new.mean(axis=0)
        kl = kl_divergence(P, Y_new)
        if config.monotone_guard and exag == 1.0 and kl > history[-1]:
            Y_new, kl = _backtrack(P, Y, grad, lr, history[-1])
            update = np.zeros_like(Y)
            gains = np.ones_like(Y)
        Y = Y_new
        history.append(kl)
    if labels is not None:
        labels = np.asarray(labels).copy()
    return Projection2D(Y[rows], labels, history)


# ---------------------------------------------------------------------------
# figures

_SVG_RC = {"svg.hashsalt": "plncf", "svg.fonttype": "path"}


def _scatter(ax, projection: Projection2D, title: str) -> list:
    coords = projection.coords
    labels = projection.overlay_labels
    if labels is None:
        raise ValueError("projection carries no cluster labels")
    clusters = sorted(set(int(v) for v in labels))
    cmap = {c: f"C{i % 10}" for i, c in enumerate(clusters)}
    names = []
    for c in clusters:
        sel = labels == c
        name = f"cluster {c}"
        ax.scatter(coords[sel, 0], coords[sel, 1], s=12, c=cmap[c], label=name, linewidths=0)
        names.append(name)
    ax.legend(title=f"k = {len(clusters)}", fontsize=7, title_fontsize=8, loc="best", frameon=False)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(title, fontsize=9)
    return names


def emit_panel_figure(projections, titles, path, ncols: int = 2, caption: str | None = None) -> list:
    """Grid of overlay scatter plots; returns the legend labels of each panel."""
    projections = list(projections)
    nrows = int(np.ceil(len(projections) / ncols))
    with rc_context(_SVG_RC):
        fig = Figure(figsize=(4.5 * ncols, 4.2 * nrows + (0.4 if caption else 0.0)))
        axes = fig.subplots(nrows, ncols, squeeze=False).ravel()
        legends = [_scatter(ax, proj, title) for ax, proj, title in zip(axes, projections, titles)]
        for ax in axes[len(projections):]:
            ax.set_axis_off()
        if caption:
            fig.text(0.5, 0.01, caption, ha="center", va="bottom", fontsize=8, wrap=True)
        fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
    return legends


def emit_overlay_figure(projection: Projection2D, path, title: str, caption: str | None = None) -> list:
    """Single scatter plot, one colour per high-dimensional cluster id."""
    return emit_panel_figure([projection], [title], path, ncols=1, caption=caption)[0]


def emit_pair_figure(left: Projection2D, right: Projection2D, path, titles, caption=None) -> list:
    return emit_panel_figure([left, right], titles, path, ncols=2, caption=caption)


def emit_grid_figure(projections, path, titles, caption=None) -> list:
    if len(projections) != 4:
        raise ValueError("grid figure takes exactly four projections")
    return emit_panel_figure(projections, titles, path, ncols=2, caption=caption)


def write_coords(projection: Projection2D, path, ids=None) -> None:
    n = projection.coords.shape[0]
    ids = range(n) if ids is None else ids
    labels = projection.overlay_labels if projection.overlay_labels is not None else [""] * n
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y", "label"])
        for i, (x, y), lab in zip(ids, projection.coords, labels):
            w.writerow([i, repr(float(x)), repr(float(y)), lab if lab == "" else int(lab)])
