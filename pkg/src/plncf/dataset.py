"""Survey-driven dataset: user intake vectors, kNN group profiles, memberships.

Each user answers two questionnaire blocks (6 support-preference weights and
10 demographic/condition weights).  Each block is normalized onto its own
probability simplex, and the two blocks are concatenated into a 16-d vector.
Groups are synthesized by averaging a user's cosine nearest neighbours, and
every membership carries an alignment score in [0, 1] used later as a soft
training target.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AllZeroBlock, InsufficientUsers, NegativeEntry, SchemaError, ZeroVector

Q33_DIM = 6
Q26_DIM = 10
FEATURE_DIM = Q33_DIM + Q26_DIM
GENERATOR_VERSION = "1"

# Published statistics of the survey dataset: 165 users, 498 groups, kNN k=6,
# three repetitions per user.  165 * 3 = 495, so three extra groups close the gap.
CANONICAL = dict(n=165, reps=3, k=6, extra_groups=3, extra_policy="cap")


@dataclass(frozen=True)
class SurveyVector:
    user_id: int
    q33: tuple
    q26: tuple

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.q33 + self.q26, dtype=np.float64)


@dataclass(frozen=True)
class GroupProfile:
    group_id: int
    features: tuple
    source_user: int

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.features, dtype=np.float64)


@dataclass(frozen=True)
class Interaction:
    user_id: int
    group_id: int
    align: float


@dataclass
class DatasetBundle:
    users: list
    groups: list
    interactions: list
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.users)

    @property
    def m(self) -> int:
        return len(self.groups)

    def user_matrix(self) -> np.ndarray:
        return np.array([u.q33 + u.q26 for u in self.users], dtype=np.float64).reshape(-1, FEATURE_DIM)

    def group_matrix(self) -> np.ndarray:
        return np.array([g.features for g in self.groups], dtype=np.float64).reshape(-1, FEATURE_DIM)

    def positives_by_user(self) -> dict:
        out = {u.user_id: set() for u in self.users}
        for it in self.interactions:
            out.setdefault(it.user_id, set()).add(it.group_id)
        return out


def _normalize_block(raw, size, name):
    block = np.asarray(raw, dtype=np.float64)
    if block.shape != (size,):
        raise ValueError(f"{name} must have {size} entries, got shape {block.shape}")
    if np.any(block < 0):
        raise NegativeEntry(f"{name} has a negative entry")
    total = block.sum()
    if total <= 0:
        raise AllZeroBlock(f"{name} sums to zero")
    return tuple(float(v) for v in block / total)


def normalize_survey(raw_q33, raw_q26, user_id: int = 0) -> SurveyVector:
    """Project each questionnaire block onto its own unit simplex."""
    return SurveyVector(
        user_id=int(user_id),
        q33=_normalize_block(raw_q33, Q33_DIM, "q33"),
        q26=_normalize_block(raw_q26, Q26_DIM, "q26"),
    )


def align_features(x, z) -> float:
    """Cosine similarity of user and group features rescaled to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    nx = np.linalg.norm(x)
    nz = np.linalg.norm(z)
    if nx == 0 or nz == 0:
        raise ZeroVector("align_features needs two nonzero vectors")
    cos = float(np.dot(x, z) / (nx * nz))
    cos = min(1.0, max(-1.0, cos))
    return (cos + 1.0) / 2.0


def _as_matrix(users) -> np.ndarray:
    if isinstance(users, np.ndarray):
        return np.asarray(users, dtype=np.float64)
    return np.array([u.vector for u in users], dtype=np.float64).reshape(-1, FEATURE_DIM)


def _cosine_distances_from(X: np.ndarray, i: int) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1)
    return 1.0 - (X @ X[i]) / (norms * norms[i])


def neighborhood(X: np.ndarray, seed_user: int, k: int, skip: int = 0) -> np.ndarray:
    """Indices of the seed user plus its k-1 nearest others after skipping `skip`.

    Other users are ordered by cosine distance to the seed (stable on index).
    """
    n = X.shape[0]
    if n < k or (n - 1) < (k - 1) + skip:
        raise InsufficientUsers(f"need at least {k + skip} users for k={k}, skip={skip}; have {n}")
    dist = _cosine_distances_from(X, seed_user)
    others = np.delete(np.arange(n), seed_user)
    order = others[np.argsort(dist[others], kind="stable")]
    return np.concatenate([[seed_user], order[skip:skip + k - 1]]).astype(int)


def build_group_profile(seed_user: int, users, k: int = 6, skip: int = 0, group_id: int = 0) -> GroupProfile:
    """Mean survey vector of `seed_user` and its nearest cosine neighbours.

    ``skip`` drops that many of the closest non-self neighbours first; the
    generator uses it to make repeated groups for one user differ.
    """
    X = _as_matrix(users)
    if X.shape[0] == 0:
        raise InsufficientUsers("no users")
    idx = neighborhood(X, seed_user, k, skip)
    profile = X[idx].mean(axis=0)
    return GroupProfile(group_id=int(group_id), features=tuple(float(v) for v in profile), source_user=int(seed_user))


def generate_synthetic_dataset(
    n: int,
    reps: int,
    k: int,
    rng_seed: int,
    alpha: float = 1.0,
    extra_groups: int = 0,
    extra_policy: str = "cap",
) -> DatasetBundle:
    """Draw a synthetic survey population and its kNN-derived groups.

    Survey blocks are sampled from a symmetric Dirichlet(alpha).  Each user
    seeds ``reps`` groups; repetition r skips the r nearest non-self neighbours.
    ``extra_groups`` further groups come from the lowest-variance users; with
    ``extra_policy="cap"`` the receiving user then drops its weakest-align
    membership so every user keeps exactly ``reps`` memberships, while
    ``"keep"`` retains all of them.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if n < k:
        raise InsufficientUsers(f"n={n} < k={k}")
    if extra_policy not in ("cap", "keep"):
        raise ValueError(f"unknown extra_policy {extra_policy!r}")
    if extra_groups > n:
        raise ValueError("extra_groups cannot exceed n")

    rng = np.random.default_rng(rng_seed)
    users = []
    for u in range(n):
        q33 = rng.dirichlet(np.full(Q33_DIM, alpha))
        q26 = rng.dirichlet(np.full(Q26_DIM, alpha))
        users.append(normalize_survey(q33, q26, user_id=u))
    X = _as_matrix(users)

    groups = []
    interactions = []
    for u in range(n):
        for r in range(reps):
            g = build_group_profile(u, X, k=k, skip=r, group_id=len(groups))
            groups.append(g)
            interactions.append(Interaction(u, g.group_id, align_features(X[u], g.features)))

    if extra_groups:
        variances = X.var(axis=1)
        chosen = np.argsort(variances, kind="stable")[:extra_groups]
        for u in (int(c) for c in chosen):
            g = build_group_profile(u, X, k=k, skip=reps, group_id=len(groups))
            groups.append(g)
            interactions.append(Interaction(u, g.group_id, align_features(X[u], g.features)))
            if extra_policy == "cap":
                mine = [it for it in interactions if it.user_id == u]
                weakest = min(mine, key=lambda it: (it.align, it.group_id))
                interactions.remove(weakest)

    meta = dict(
        n=n, m=len(groups), k=k, reps=reps, rng_seed=rng_seed, alpha=alpha,
        extra_groups=extra_groups, extra_policy=extra_policy, generator_version=GENERATOR_VERSION,
    )
    return DatasetBundle(users=users, groups=groups, interactions=interactions, meta=meta)


# serialization

def bundle_to_dict(bundle: DatasetBundle) -> dict:
    return {
        "users": [{"user_id": u.user_id, "q33": list(u.q33), "q26": list(u.q26)} for u in bundle.users],
        "groups": [
            {"group_id": g.group_id, "features": list(g.features), "source_user": g.source_user}
            for g in bundle.groups
        ],
        "interactions": [
            {"user_id": it.user_id, "group_id": it.group_id, "align": it.align} for it in bundle.interactions
        ],
        "meta": dict(bundle.meta),
    }


def _require(obj, key, kind, where):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{where}: missing key {key!r}")
    val = obj[key]
    if kind is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise SchemaError(f"{where}.{key}: expected a number")
        return float(val)
    if kind is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise SchemaError(f"{where}.{key}: expected an integer")
        return val
    if not isinstance(val, kind):
        raise SchemaError(f"{where}.{key}: expected {kind.__name__}")
    return val


def _float_list(obj, key, size, where):
    vals = _require(obj, key, list, where)
    if len(vals) != size:
        raise SchemaError(f"{where}.{key}: expected {size} values, got {len(vals)}")
    out = []
    for v in vals:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaError(f"{where}.{key}: non-numeric entry")
        out.append(float(v))
    return tuple(out)


def bundle_from_dict(data, align_tol: float = 1e-6) -> DatasetBundle:
    if not isinstance(data, dict):
        raise SchemaError("top level must be an object")
    for key in ("users", "groups", "interactions", "meta"):
        if key not in data:
            raise SchemaError(f"missing top-level key {key!r}")
    users = []
    for i, raw in enumerate(_require(data, "users", list, "root")):
        where = f"users[{i}]"
        users.append(SurveyVector(
            user_id=_require(raw, "user_id", int, where),
            q33=_float_list(raw, "q33", Q33_DIM, where),
            q26=_float_list(raw, "q26", Q26_DIM, where),
        ))
    groups = []
    for i, raw in enumerate(_require(data, "groups", list, "root")):
        where = f"groups[{i}]"
        groups.append(GroupProfile(
            group_id=_require(raw, "group_id", int, where),
            features=_float_list(raw, "features", FEATURE_DIM, where),
            source_user=_require(raw, "source_user", int, where),
        ))
    if [u.user_id for u in users] != list(range(len(users))):
        raise SchemaError("user ids must be 0..n-1 in order")
    if [g.group_id for g in groups] != list(range(len(groups))):
        raise SchemaError("group ids must be 0..m-1 in order")

    interactions = []
    seen = set()
    for i, raw in enumerate(_require(data, "interactions", list, "root")):
        where = f"interactions[{i}]"
        it = Interaction(
            user_id=_require(raw, "user_id", int, where),
            group_id=_require(raw, "group_id", int, where),
            align=_require(raw, "align", float, where),
        )
        if not (0 <= it.user_id < len(users)) or not (0 <= it.group_id < len(groups)):
            raise SchemaError(f"{where}: id out of range")
        if (it.user_id, it.group_id) in seen:
            raise SchemaError(f"{where}: duplicate pair ({it.user_id}, {it.group_id})")
        seen.add((it.user_id, it.group_id))
        expected = align_features(users[it.user_id].vector, groups[it.group_id].vector)
        if abs(expected - it.align) > align_tol:
            raise SchemaError(f"{where}: stored align {it.align} disagrees with recomputed {expected}")
        interactions.append(it)
    meta = _require(data, "meta", dict, "root")
    return DatasetBundle(users=users, groups=groups, interactions=interactions, meta=dict(meta))


def save_bundle(bundle: DatasetBundle, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    text = json.dumps(bundle_to_dict(bundle), indent=1, sort_keys=True)
    Path(path).write_text(text + "\n")


def load_bundle(path) -> DatasetBundle:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from exc
    return bundle_from_dict(data)


def export_csv(bundle: DatasetBundle, directory) -> list:
    """Write users.csv, groups.csv and interactions.csv; return the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []

    path = directory / "users.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id"] + [f"q33_{i}" for i in range(Q33_DIM)] + [f"q26_{i}" for i in range(Q26_DIM)])
        for u in bundle.users:
            w.writerow([u.user_id] + [repr(v) for v in u.q33 + u.q26])
    paths.append(path)

    path = directory / "groups.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_id", "source_user"] + [f"f{i}" for i in range(FEATURE_DIM)])
        for g in bundle.groups:
            w.writerow([g.group_id, g.source_user] + [repr(v) for v in g.features])
    paths.append(path)

    path = directory / "interactions.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "group_id", "align"])
        for it in bundle.interactions:
            w.writerow([it.user_id, it.group_id, repr(it.align)])
    paths.append(path)
    return paths
