"""Sampled top-K ranking metrics, seed aggregation and rank correlation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyResults, LengthMismatch, TooFewSeeds, ZeroVariance
from .models import ARCHS, ModelState, display_name, forward

K = 5


@dataclass(frozen=True)
class RankResult:
    user_id: int
    rank: int


@dataclass
class EvalReport:
    model: str
    protocol: str
    seed: int
    hr_at_5: float
    ndcg_at_5: float
    per_user: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(model=self.model, protocol=self.protocol, seed=self.seed,
                    hr_at_5=self.hr_at_5, ndcg_at_5=self.ndcg_at_5,
                    per_user=[[r.user_id, r.rank] for r in self.per_user])

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(data["model"], data["protocol"], int(data["seed"]), float(data["hr_at_5"]),
                   float(data["ndcg_at_5"]), [RankResult(int(u), int(r)) for u, r in data["per_user"]])


def rank_candidate_sets(state: ModelState, candidate_sets, X: np.ndarray) -> list:
    """Rank of each held-out positive among its candidates, scored in one batch.

    Negatives tying the positive count against it, so a constant scorer puts
    every positive last.  Logits are compared rather than sigmoid scores so
    that saturation cannot manufacture ties.
    """
    if not candidate_sets:
        return []
    groups = np.stack([cs.groups for cs in candidate_sets])
    users = np.repeat([cs.user_id for cs in candidate_sets], groups.shape[1])
    logits = forward(state, users, groups.ravel(), X[users]).logit.reshape(groups.shape)
    ranks = 1 + np.sum(logits[:, 1:] >= logits[:, :1], axis=1)
    return [RankResult(cs.user_id, int(r)) for cs, r in zip(candidate_sets, ranks)]


def rank_positive(state: ModelState, candidate_set, x_u) -> RankResult:
    x_u = np.asarray(x_u, dtype=np.float64)
    X = np.zeros((state.n, x_u.shape[-1]))
    X[candidate_set.user_id] = x_u
    return rank_candidate_sets(state, [candidate_set], X)[0]


def _ranks(results) -> np.ndarray:
    ranks = np.array([r.rank if isinstance(r, RankResult) else int(r) for r in results], dtype=np.int64)
    if ranks.size == 0:
        raise EmptyResults("no ranking results")
    return ranks


def hr_at_k(results, k: int = K) -> float:
    """Percentage of held-out positives ranked within the top k."""
    ranks = _ranks(results)
    return 100.0 * float(np.mean(ranks <= k))


def ndcg_at_k(results, k: int = K) -> float:
    """Single-relevant-item NDCG (ideal DCG = 1) as a percentage."""
    ranks = _ranks(results)
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return 100.0 * float(np.mean(gains))


def evaluate(state: ModelState, candidate_sets, X, model: str = "", protocol: str = "", seed: int = 0) -> EvalReport:
    results = rank_candidate_sets(state, candidate_sets, X)
    return EvalReport(model or state.arch, protocol, seed, hr_at_k(results), ndcg_at_k(results), results)


def mean_std(values) -> tuple:
    """Mean and sample standard deviation (n - 1 denominator)."""
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size < 2:
        raise TooFewSeeds(f"need at least 2 values, got {vals.size}")
    return float(vals.mean()), float(vals.std(ddof=1))


def aggregate_seeds(reports) -> dict:
    """{model: {"hr_at_5": (mean, std), "ndcg_at_5": (mean, std), "seeds": [...]}}"""
    by_model = {}
    protocols = set()
    for rep in reports:
        by_model.setdefault(rep.model, []).append(rep)
        protocols.add(rep.protocol)
    if len(protocols) > 1:
        raise ValueError(f"reports mix protocols: {sorted(protocols)}")
    out = {}
    for model, reps in by_model.items():
        reps = sorted(reps, key=lambda r: r.seed)
        if len(reps) < 2:
            raise TooFewSeeds(f"{model}: {len(reps)} report(s)")
        out[model] = {
            "hr_at_5": mean_std(r.hr_at_5 for r in reps),
            "ndcg_at_5": mean_std(r.ndcg_at_5 for r in reps),
            "seeds": [r.seed for r in reps],
        }
    return out


def format_cell(mean: float, std: float, digits: int = 2) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def write_metric_table(aggregate: dict, path, models=ARCHS) -> list:
    """Model, HR@5 (%), NDCG@5 (%) rows in the usual model order."""
    rows = [["Model", "HR@5 (%)", "NDCG@5 (%)"]]
    for arch in models:
        if arch not in aggregate:
            continue
        cell = aggregate[arch]
        rows.append([display_name(arch), format_cell(*cell["hr_at_5"]), format_cell(*cell["ndcg_at_5"])])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    return rows


def save_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n")


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# rank correlation

def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the positions they span."""
    a = np.asarray(values, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(a.size, dtype=np.float64)
    s = a[order]
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and s[j + 1] == s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(xs, ys) -> float:
    """Pearson correlation of average ranks."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape:
        raise LengthMismatch(f"{xs.shape} vs {ys.shape}")
    if xs.size < 3:
        raise LengthMismatch(f"need at least 3 pairs, got {xs.size}")
    rx = average_ranks(xs) - (xs.size + 1) / 2.0
    ry = average_ranks(ys) - (ys.size + 1) / 2.0
    sx = math.sqrt(float(rx @ rx))
    sy = math.sqrt(float(ry @ ry))
    if sx == 0 or sy == 0:
        raise ZeroVariance("constant input has no rank variance")
    return max(-1.0, min(1.0, float(rx @ ry) / (sx * sy)))


def separability_accuracy_analysis(runs) -> float:
    """Spearman rho between fixed-k silhouette and HR@5 over (model, seed) runs."""
    runs = list(runs)
    return spearman_rho([r[0] for r in runs], [r[1] for r in runs])
