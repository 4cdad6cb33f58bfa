"""MF, MLP and NeuMF scorers, with and without a pseudo-label (PL) branch.

A model is a plain dict of named numpy arrays plus an architecture tag.  All
forward functions are vectorized over index arrays ``u`` and ``g``; passing
``return_cache=True`` to :func:`forward` keeps the intermediates that
:func:`backward` needs for analytic gradients.

PL variants keep a second pair of embedding tables (``P_pl``, ``Q_pl``).  Their
cosine, and for MF-PL/NeuMF-PL the cosine between a projection of the user's
survey vector and ``Q_pl``, are added to the main logit with learnable scalar
weights ``w_a`` and ``w_x``.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import IndexOutOfRange, ShapeMismatch

MF, MLP, NEUMF = "MF", "MLP", "NeuMF"
MF_PL, MLP_PL, NEUMF_PL = "MF_PL", "MLP_PL", "NeuMF_PL"
ARCHS = (MF, MF_PL, MLP, MLP_PL, NEUMF, NEUMF_PL)
BASELINE_OF = {MF_PL: MF, MLP_PL: MLP, NEUMF_PL: NEUMF}
PL_ARCHS = tuple(BASELINE_OF)
FEATURE_ARCHS = (MF_PL, NEUMF_PL)

DEFAULT_DIMS = dict(
    mf=64, mf_pl=96,            # MF-PL widens the main table
    mlp=32, mlp_hidden=(32,),
    gmf=32, neumf_mlp=64, neumf_tower=(64, 32),  # tower input is 2 * neumf_mlp = 128
    pl=32, features=16,
)
COS_EPS = 1e-8
EMBED_STD = 1.0  # torch.nn.Embedding default


def display_name(arch: str) -> str:
    return arch.replace("_", "-")


def parse_arch(name: str) -> str:
    key = name.replace("-", "_")
    for arch in ARCHS:
        if arch.lower() == key.lower():
            return arch
    raise ValueError(f"unknown architecture {name!r}")


@dataclass
class ModelState:
    arch: str
    params: dict
    n: int
    m: int
    opt_state: object = None
    rng_state: dict | None = None

    def copy(self) -> "ModelState":
        return ModelState(self.arch, {k: v.copy() for k, v in self.params.items()}, self.n, self.m)

    @property
    def has_pl(self) -> bool:
        return self.arch in PL_ARCHS

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def main_embeddings(self, entity: str) -> np.ndarray:
        """User or group main embedding matrix; NeuMF concatenates its GMF and MLP tables."""
        side = _side(entity)
        if self.arch in (NEUMF, NEUMF_PL):
            return np.hstack([self.params[f"{side}_gmf"], self.params[f"{side}_mlp"]])
        return self.params[side]

    def pl_embeddings(self, entity: str) -> np.ndarray:
        if not self.has_pl:
            raise KeyError(f"{self.arch} has no PL embeddings")
        return self.params[f"{_side(entity)}_pl"]


def _side(entity: str) -> str:
    e = entity.lower()
    if e == "user":
        return "P"
    if e == "group":
        return "Q"
    raise ValueError(f"entity must be 'user' or 'group', got {entity!r}")


@dataclass
class Prediction:
    score: np.ndarray
    logit: np.ndarray
    pl_cosine: np.ndarray | None = None
    feature_cosine: np.ndarray | None = None


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# initialization

def _param_rng(seed: int, name: str) -> np.random.Generator:
    # one stream per parameter name, so shared tables initialize identically across archs
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def _layer_shapes(arch: str, dims: dict) -> dict:
    shapes = {}
    if arch in (MF, MF_PL):
        d = dims["mf_pl"] if arch == MF_PL else dims["mf"]
        shapes.update(P=("embed", d, "n"), Q=("embed", d, "m"))
    elif arch in (MLP, MLP_PL):
        d = dims["mlp"]
        shapes.update(P=("embed", d, "n"), Q=("embed", d, "m"))
        widths = [2 * d] + list(dims["mlp_hidden"])
        for i in range(1, len(widths)):
            shapes[f"W{i}"] = ("dense", widths[i], widths[i - 1])
            shapes[f"b{i}"] = ("bias", widths[i])
        shapes["h"] = ("head", widths[-1])
        shapes["b_out"] = ("bias", 1)
    else:
        dg, dm = dims["gmf"], dims["neumf_mlp"]
        shapes.update(P_gmf=("embed", dg, "n"), Q_gmf=("embed", dg, "m"),
                      P_mlp=("embed", dm, "n"), Q_mlp=("embed", dm, "m"))
        widths = [2 * dm] + list(dims["neumf_tower"])
        for i in range(1, len(widths)):
            shapes[f"W{i}"] = ("dense", widths[i], widths[i - 1])
            shapes[f"b{i}"] = ("bias", widths[i])
        shapes["h"] = ("head", dg + widths[-1])
        shapes["b_out"] = ("bias", 1)
    if arch in PL_ARCHS:
        shapes.update(P_pl=("embed", dims["pl"], "n"), Q_pl=("embed", dims["pl"], "m"), w_a=("fusion",))
    if arch in FEATURE_ARCHS:
        shapes.update(W_x=("dense", dims["pl"], dims["features"]), b_x=("bias", dims["pl"]), w_x=("fusion",))
    return shapes


def init_model(arch: str, n: int, m: int, rng_seed: int, dims: dict | None = None,
               embed_std: float = EMBED_STD) -> ModelState:
    """Fresh parameters: N(0, embed_std^2) embeddings, Kaiming-uniform dense
    weights, zero biases, fusion weights at 1.0.

    Each parameter draws from its own seeded stream, so tables that two
    architectures share start out identical for the same seed.
    """
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}")
    if n <= 0 or m <= 0:
        raise ValueError("n and m must be positive")
    all_dims = dict(DEFAULT_DIMS, **(dims or {}))
    params = {}
    for name, layer in _layer_shapes(arch, all_dims).items():
        kind = layer[0]
        rng = _param_rng(rng_seed, name)
        if kind == "embed":
            rows = n if layer[2] == "n" else m
            params[name] = rng.normal(0.0, embed_std, size=(rows, layer[1]))
        elif kind == "dense":
            bound = np.sqrt(6.0 / layer[2])
            params[name] = rng.uniform(-bound, bound, size=(layer[1], layer[2]))
        elif kind == "head":
            bound = np.sqrt(6.0 / layer[1])
            params[name] = rng.uniform(-bound, bound, size=(layer[1],))
        elif kind == "bias":
            params[name] = np.zeros(layer[1])
        else:
            params[name] = np.ones(1)
    return ModelState(arch, params, n, m)


# ---------------------------------------------------------------------------
# building blocks

def _check_indices(state: ModelState, u, g):
    u = np.atleast_1d(np.asarray(u, dtype=np.int64))
    g = np.atleast_1d(np.asarray(g, dtype=np.int64))
    if u.shape != g.shape:
        raise ShapeMismatch(f"user and group index arrays differ: {u.shape} vs {g.shape}")
    if u.size and (u.min() < 0 or u.max() >= state.n):
        raise IndexOutOfRange(f"user index out of range [0, {state.n})")
    if g.size and (g.min() < 0 or g.max() >= state.m):
        raise IndexOutOfRange(f"group index out of range [0, {state.m})")
    return u, g


def _cosine(a: np.ndarray, b: np.ndarray):
    """Row-wise cosine with norms floored at COS_EPS."""
    na_raw = np.linalg.norm(a, axis=1)
    nb_raw = np.linalg.norm(b, axis=1)
    na = np.maximum(na_raw, COS_EPS)
    nb = np.maximum(nb_raw, COS_EPS)
    cos = np.sum(a * b, axis=1) / (na * nb)
    return cos, (a, b, na, nb, na_raw > COS_EPS, nb_raw > COS_EPS, cos)


def _cosine_backward(dcos: np.ndarray, cache):
    a, b, na, nb, a_free, b_free, cos = cache
    da = b / (na * nb)[:, None] - np.where(a_free, cos / na**2, 0.0)[:, None] * a
    db = a / (na * nb)[:, None] - np.where(b_free, cos / nb**2, 0.0)[:, None] * b
    return dcos[:, None] * da, dcos[:, None] * db


def _tower_forward(params: dict, h0: np.ndarray):
    acts = [h0]
    pre = []
    i = 1
    while f"W{i}" in params:
        z = acts[-1] @ params[f"W{i}"].T + params[f"b{i}"]
        pre.append(z)
        acts.append(np.maximum(z, 0.0))
        i += 1
    return acts, pre


def _tower_backward(params: dict, grads: dict, acts, pre, d_out: np.ndarray) -> np.ndarray:
    d = d_out
    for i in range(len(pre), 0, -1):
        dz = d * (pre[i - 1] > 0)
        grads[f"W{i}"] += dz.T @ acts[i - 1]
        grads[f"b{i}"] += dz.sum(axis=0)
        d = dz @ params[f"W{i}"]
    return d


# ---------------------------------------------------------------------------
# main pathways

def _mf_main(state, u, g):
    pu = state.params["P"][u]
    qg = state.params["Q"][g]
    return np.sum(pu * qg, axis=1), ("mf", u, g, pu, qg)


def _mlp_main(state, u, g):
    p = state.params
    pu, qg = p["P"][u], p["Q"][g]
    h0 = np.concatenate([pu, qg], axis=1)
    acts, pre = _tower_forward(p, h0)
    logit = acts[-1] @ p["h"] + p["b_out"][0]
    return logit, ("mlp", u, g, acts, pre, pu.shape[1])


def _neumf_main(state, u, g):
    p = state.params
    pg, qg = p["P_gmf"][u], p["Q_gmf"][g]
    gmf = pg * qg
    h0 = np.concatenate([p["P_mlp"][u], p["Q_mlp"][g]], axis=1)
    acts, pre = _tower_forward(p, h0)
    feat = np.concatenate([gmf, acts[-1]], axis=1)
    logit = feat @ p["h"] + p["b_out"][0]
    return logit, ("neumf", u, g, pg, qg, feat, acts, pre)


_MAIN = {MF: _mf_main, MF_PL: _mf_main, MLP: _mlp_main, MLP_PL: _mlp_main, NEUMF: _neumf_main, NEUMF_PL: _neumf_main}


def _main_backward(state, grads, cache, dl):
    p = state.params
    kind = cache[0]
    if kind == "mf":
        _, u, g, pu, qg = cache
        np.add.at(grads["P"], u, dl[:, None] * qg)
        np.add.at(grads["Q"], g, dl[:, None] * pu)
    elif kind == "mlp":
        _, u, g, acts, pre, d = cache
        grads["h"] += acts[-1].T @ dl
        grads["b_out"] += dl.sum()
        dh0 = _tower_backward(p, grads, acts, pre, dl[:, None] * p["h"][None, :])
        np.add.at(grads["P"], u, dh0[:, :d])
        np.add.at(grads["Q"], g, dh0[:, d:])
    else:
        _, u, g, pg, qg, feat, acts, pre = cache
        grads["h"] += feat.T @ dl
        grads["b_out"] += dl.sum()
        dfeat = dl[:, None] * p["h"][None, :]
        dg = pg.shape[1]
        np.add.at(grads["P_gmf"], u, dfeat[:, :dg] * qg)
        np.add.at(grads["Q_gmf"], g, dfeat[:, :dg] * pg)
        dh0 = _tower_backward(p, grads, acts, pre, dfeat[:, dg:])
        dm = p["P_mlp"].shape[1]
        np.add.at(grads["P_mlp"], u, dh0[:, :dm])
        np.add.at(grads["Q_mlp"], g, dh0[:, dm:])


def _pred(logit, pl=None, feat=None) -> Prediction:
    return Prediction(score=sigmoid(logit), logit=logit, pl_cosine=pl, feature_cosine=feat)


def forward_mf(state: ModelState, u, g) -> Prediction:
    """sigmoid(p_u . q_g) on the main tables."""
    u, g = _check_indices(state, u, g)
    return _pred(_mf_main(state, u, g)[0])


def forward_mlp(state: ModelState, u, g) -> Prediction:
    u, g = _check_indices(state, u, g)
    return _pred(_mlp_main(state, u, g)[0])


def forward_neumf(state: ModelState, u, g) -> Prediction:
    u, g = _check_indices(state, u, g)
    return _pred(_neumf_main(state, u, g)[0])


def pl_cosine(state: ModelState, u, g) -> np.ndarray:
    """Cosine between the PL-specific user and group embeddings."""
    if not state.has_pl:
        raise ValueError(f"{state.arch} has no PL branch")
    u, g = _check_indices(state, u, g)
    return _cosine(state.params["P_pl"][u], state.params["Q_pl"][g])[0]


def feature_cosine(state: ModelState, x_u, g) -> np.ndarray:
    """Cosine between the projected survey vector and the group's PL embedding.

    A zero projection yields 0.0 through the norm floor.
    """
    if state.arch not in FEATURE_ARCHS:
        raise ValueError(f"{state.arch} has no feature projection")
    g = np.atleast_1d(np.asarray(g, dtype=np.int64))
    x = np.atleast_2d(np.asarray(x_u, dtype=np.float64))
    if g.size and (g.min() < 0 or g.max() >= state.m):
        raise IndexOutOfRange(f"group index out of range [0, {state.m})")
    proj = x @ state.params["W_x"].T + state.params["b_x"]
    return _cosine(proj, state.params["Q_pl"][g])[0]


def forward(state: ModelState, u, g, x_u=None, return_cache: bool = False):
    """Fused prediction: main logit + w_a * PL cosine (+ w_x * feature cosine).

    ``x_u`` holds one survey row per (u, g) pair; baselines ignore it.
    """
    u, g = _check_indices(state, u, g)
    p = state.params
    main_logit, main_cache = _MAIN[state.arch](state, u, g)
    logit = main_logit
    pl = feat = None
    cache = dict(u=u, g=g, main=main_cache)
    if state.has_pl:
        pl, cache["pl"] = _cosine(p["P_pl"][u], p["Q_pl"][g])
        logit = logit + p["w_a"][0] * pl
        cache["a_pl"] = pl
    if state.arch in FEATURE_ARCHS:
        if x_u is None:
            raise ValueError(f"{state.arch} needs survey features x_u")
        x = np.atleast_2d(np.asarray(x_u, dtype=np.float64))
        if x.shape[0] != u.shape[0]:
            raise ShapeMismatch(f"x_u has {x.shape[0]} rows for {u.shape[0]} pairs")
        proj = x @ p["W_x"].T + p["b_x"]
        feat, cache["feat"] = _cosine(proj, p["Q_pl"][g])
        logit = logit + p["w_x"][0] * feat
        cache["x"] = x
        cache["a_feat"] = feat
    pred = _pred(logit, pl, feat)
    if return_cache:
        return pred, cache
    return pred


def zero_grads(state: ModelState) -> dict:
    return {k: np.zeros_like(v) for k, v in state.params.items()}


def backward(state: ModelState, cache: dict, dlogit) -> dict:
    """Gradients of sum_i dlogit_i * logit_i with respect to every parameter.

    Embedding rows that no pair in the batch touches get exactly zero.
    """
    dl = np.atleast_1d(np.asarray(dlogit, dtype=np.float64))
    if dl.shape != cache["u"].shape:
        raise ShapeMismatch(f"dlogit shape {dl.shape} does not match batch {cache['u'].shape}")
    p = state.params
    grads = zero_grads(state)
    _main_backward(state, grads, cache["main"], dl)
    u, g = cache["u"], cache["g"]
    if state.has_pl:
        grads["w_a"] += np.sum(dl * cache["a_pl"])
        dp, dq = _cosine_backward(dl * p["w_a"][0], cache["pl"])
        np.add.at(grads["P_pl"], u, dp)
        np.add.at(grads["Q_pl"], g, dq)
    if state.arch in FEATURE_ARCHS:
        grads["w_x"] += np.sum(dl * cache["a_feat"])
        dproj, dq = _cosine_backward(dl * p["w_x"][0], cache["feat"])
        grads["W_x"] += dproj.T @ cache["x"]
        grads["b_x"] += dproj.sum(axis=0)
        np.add.at(grads["Q_pl"], g, dq)
    return grads
