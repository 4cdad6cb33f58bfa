"""Evaluation protocols and negative samplers."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DatasetBundle, Interaction
from .errors import InsufficientCandidates, NoNegativesAvailable, TooFewInteractions

LEAVE_ONE_OUT = "loo"
RATIO = "ratio"
PROTOCOLS = (LEAVE_ONE_OUT, RATIO)
N_NEGATIVES = 99


@dataclass
class SplitPlan:
    train: list
    validation: list
    test: list
    protocol: str
    rng_seed: int

    def train_positives(self) -> dict:
        out = {}
        for it in self.train:
            out.setdefault(it.user_id, set()).add(it.group_id)
        return out

    def to_dict(self) -> dict:
        def rows(items):
            return [[it.user_id, it.group_id, it.align] for it in items]
        return dict(protocol=self.protocol, rng_seed=self.rng_seed,
                    train=rows(self.train), validation=rows(self.validation), test=rows(self.test))

    @classmethod
    def from_dict(cls, data: dict) -> "SplitPlan":
        def items(rows):
            return [Interaction(int(u), int(g), float(a)) for u, g, a in rows]
        return cls(items(data["train"]), items(data["validation"]), items(data["test"]),
                   data["protocol"], int(data["rng_seed"]))


@dataclass(frozen=True)
class CandidateSet:
    user_id: int
    positive_group: int
    negatives: tuple

    @property
    def groups(self) -> np.ndarray:
        """Positive first, then the sampled negatives."""
        return np.array((self.positive_group,) + self.negatives, dtype=int)


def leave_one_out_split(bundle: DatasetBundle, rng_seed: int) -> SplitPlan:
    """Per user: one interaction to test, one to validation, the rest to train."""
    rng = np.random.default_rng(rng_seed)
    by_user = {u.user_id: [] for u in bundle.users}
    for it in bundle.interactions:
        by_user.setdefault(it.user_id, []).append(it)
    train, val, test = [], [], []
    for user_id in sorted(by_user):
        items = by_user[user_id]
        if len(items) < 3:
            raise TooFewInteractions(user_id, len(items))
        order = rng.permutation(len(items))
        test.append(items[order[0]])
        val.append(items[order[1]])
        train.extend(items[i] for i in order[2:])
    return SplitPlan(train, val, test, LEAVE_ONE_OUT, rng_seed)


def ratio_split(bundle: DatasetBundle, rng_seed: int, val_frac: float = 0.15, test_frac: float = 0.15) -> SplitPlan:
    """Random 70/15/15 split over all memberships (not stratified by user).

    Holdout sizes use Python's round() (half to even); train takes the rest.
    """
    items = list(bundle.interactions)
    n_total = len(items)
    if n_total < 10:
        raise ValueError(f"ratio split needs at least 10 interactions, got {n_total}")
    n_val = round(val_frac * n_total)
    n_test = round(test_frac * n_total)
    order = np.random.default_rng(rng_seed).permutation(n_total)
    test = [items[i] for i in order[:n_test]]
    val = [items[i] for i in order[n_test:n_test + n_val]]
    train = [items[i] for i in order[n_test + n_val:]]
    return SplitPlan(train, val, test, RATIO, rng_seed)


def make_split(bundle: DatasetBundle, protocol: str, rng_seed: int) -> SplitPlan:
    if protocol == LEAVE_ONE_OUT:
        return leave_one_out_split(bundle, rng_seed)
    if protocol == RATIO:
        return ratio_split(bundle, rng_seed)
    raise ValueError(f"unknown protocol {protocol!r}")


def sample_training_negative(user_id: int, rng: np.random.Generator, positives_of_user, m: int) -> int:
    """Uniform draw from the groups the user is not a member of."""
    positives = set(int(g) for g in positives_of_user)
    if len(positives) >= m:
        raise NoNegativesAvailable(f"user {user_id} is a member of every group")
    while True:
        g = int(rng.integers(m))
        if g not in positives:
            return g


def build_candidate_set(user_id: int, held_out: Interaction, train_positives_of_user, m: int,
                        rng: np.random.Generator, n_negatives: int = N_NEGATIVES) -> CandidateSet:
    """Held-out positive plus negatives sampled without replacement.

    Negatives exclude the user's training positives and the held-out group.
    """
    excluded = set(int(g) for g in train_positives_of_user) | {held_out.group_id}
    eligible = np.array([g for g in range(m) if g not in excluded], dtype=int)
    if eligible.size < n_negatives:
        raise InsufficientCandidates(f"user {user_id}: {eligible.size} eligible negatives < {n_negatives}")
    negatives = rng.choice(eligible, size=n_negatives, replace=False)
    return CandidateSet(int(user_id), int(held_out.group_id), tuple(int(g) for g in negatives))


def build_candidate_sets(plan: SplitPlan, which: str, m: int, rng_seed) -> list:
    """Candidate sets for every held-out interaction of ``plan.validation`` or ``plan.test``."""
    held = {"validation": plan.validation, "test": plan.test}[which]
    rng = np.random.default_rng(rng_seed)
    train_pos = plan.train_positives()
    return [build_candidate_set(it.user_id, it, train_pos.get(it.user_id, ()), m, rng) for it in held]


def save_split(plan: SplitPlan, path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), sort_keys=True) + "\n")


def load_split(path) -> SplitPlan:
    return SplitPlan.from_dict(json.loads(Path(path).read_text()))
