"""Experiment matrix orchestration.

Every stage writes under one output root::

    generate/                         dataset.json, users.csv, groups.csv, interactions.csv
    train/{model}_{protocol}_{seed}/  split.json, checkpoint.npz, trainlog.csv, done.json
    evaluate/{model}_{protocol}_{seed}/eval_report.json
    cluster/{model}_{protocol}_{seed}/silhouette_{entity}_{rep}.json, fixed_k.json
    visualize/{model}_loo_{seed}/     {model}_user_{rep}_{seed}.svg, tsne_coords.csv, tsne_kl.csv
    visualize/figures/                composite figures
    report/                           table1.csv, table2.csv, table3.csv, spearman.json
    run_manifest.json

Training is resumable: a run whose done.json digest matches the current
inputs is skipped.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from .clustering import (
    K_GRID,
    RESTARTS,
    ClusterReport,
    build_table3,
    cosine_silhouette,
    load_cluster_report,
    optimal_k_scan,
    save_cluster_report,
    spherical_kmeans,
    write_table,
)
from .dataset import CANONICAL, export_csv, generate_synthetic_dataset, load_bundle, save_bundle
from .errors import MissingRuns
from .evaluation import aggregate_seeds, evaluate, load_report, save_report, spearman_rho, write_metric_table
from .models import ARCHS, PL_ARCHS, display_name, parse_arch
from .splits import LEAVE_ONE_OUT, RATIO, build_candidate_sets, load_split, make_split, save_split
from .training import LAMBDA_TABLE, SEEDS, STREAM_TEST, TrainConfig, load_checkpoint, save_checkpoint, stream_seed, train
from .visualization import TsneConfig, emit_grid_figure, emit_overlay_figure, emit_pair_figure, tsne_project, write_coords

log = logging.getLogger("plncf")

PROTOCOLS = (LEAVE_ONE_OUT, RATIO)
OUT_ENV = "PLNCF_OUT"
MANIFEST = "run_manifest.json"
STAGES = ("generate", "train", "evaluate", "cluster", "visualize", "report")

# keys of TrainConfig that the matrix sets per run rather than from config
_PER_RUN_KEYS = {"lambda_pl", "seed", "protocol", "freeze", "dims"}

# (model, representation) panels of the two user-embedding figures
FIG_PAIR = (("NeuMF", "main"), ("NeuMF_PL", "pl"))
FIG_GRID = (("MF", "main"), ("MF_PL", "pl"), ("MLP", "main"), ("MLP_PL", "pl"))


def _default_lambdas() -> dict:
    out = {}
    for (arch, protocol), value in LAMBDA_TABLE.items():
        out.setdefault(arch, {})[protocol] = value
    return out


@dataclass
class ExperimentConfig:
    n: int = CANONICAL["n"]
    reps: int = CANONICAL["reps"]
    k: int = CANONICAL["k"]
    data_seed: int = 0
    extra_groups: int | None = None      # None: the canonical 3 at n=165, reps=3, otherwise 0
    extra_policy: str = CANONICAL["extra_policy"]
    models: tuple = ARCHS
    protocols: tuple = PROTOCOLS
    seeds: tuple = SEEDS
    lambdas: dict = field(default_factory=_default_lambdas)
    train: dict = field(default_factory=dict)
    k_grid: tuple = K_GRID
    restarts: int = RESTARTS
    fixed_k: int = 5
    tsne: dict = field(default_factory=dict)
    figure_seed: int = 42
    output_dir: str = "out"

    def __post_init__(self):
        self.models = tuple(parse_arch(m) for m in self.models)
        self.models = tuple(a for a in ARCHS if a in self.models)
        self.protocols = tuple(self.protocols)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.k_grid = tuple(sorted(int(k) for k in self.k_grid))
        if not self.models or not self.protocols or not self.seeds:
            raise ValueError("models, protocols and seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"seeds must be distinct: {self.seeds}")
        bad = [p for p in self.protocols if p not in PROTOCOLS]
        if bad:
            raise ValueError(f"unknown protocol(s) {bad}; expected {PROTOCOLS}")
        if self.n <= 0 or self.reps <= 0 or self.k <= 0:
            raise ValueError("n, reps and k must be positive")
        clash = _PER_RUN_KEYS & set(self.train)
        if clash:
            raise ValueError(f"train section may not set {sorted(clash)}")
        self.lambdas = {parse_arch(a): {str(p): float(v) for p, v in d.items()} for a, d in self.lambdas.items()}
        for arch, by_protocol in self.lambdas.items():
            if arch not in PL_ARCHS:
                raise ValueError(f"lambda given for baseline {arch}")
            if any(v < 0 for v in by_protocol.values()):
                raise ValueError(f"negative lambda for {arch}")
        self.train_config(self.models[0], self.protocols[0], self.seeds[0])
        TsneConfig(**self.tsne)
        if not self.k_grid or self.k_grid[0] < 2 or self.fixed_k < 2:
            raise ValueError("cluster counts must be at least 2")

    @property
    def n_extra_groups(self) -> int:
        if self.extra_groups is not None:
            return self.extra_groups
        canonical = (self.n, self.reps) == (CANONICAL["n"], CANONICAL["reps"])
        return CANONICAL["extra_groups"] if canonical else 0

    def lambda_for(self, model: str, protocol: str) -> float:
        return self.lambdas.get(model, {}).get(protocol, 0.0)

    def train_config(self, model: str, protocol: str, seed: int) -> TrainConfig:
        return TrainConfig(**self.train, lambda_pl=self.lambda_for(model, protocol), seed=seed, protocol=protocol)

    def runs(self) -> list:
        """(model, protocol, seed) for every cell of the matrix."""
        return [(m, p, s) for p in self.protocols for m in self.models for s in self.seeds]

    @property
    def visual_seed(self) -> int:
        return self.figure_seed if self.figure_seed in self.seeds else self.seeds[0]

    def to_dict(self) -> dict:
        return dict(
            dataset=dict(n=self.n, reps=self.reps, k=self.k, seed=self.data_seed, extra_policy=self.extra_policy,
                         **({} if self.extra_groups is None else {"extra_groups": self.extra_groups})),
            experiment=dict(models=list(self.models), protocols=list(self.protocols), seeds=list(self.seeds),
                            output_dir=self.output_dir),
            train=dict(self.train),
            **{"lambda": {a: dict(v) for a, v in self.lambdas.items()}},
            clustering=dict(k_grid=list(self.k_grid), restarts=self.restarts, fixed_k=self.fixed_k),
            tsne=dict(self.tsne),
            figures=dict(seed=self.figure_seed),
        )

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {"dataset", "experiment", "train", "lambda", "clustering", "tsne", "figures"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config section(s): {sorted(unknown)}")
        kw = {}
        _take(kw, data.get("dataset", {}), "dataset",
              dict(n="n", reps="reps", k="k", seed="data_seed", extra_groups="extra_groups",
                   extra_policy="extra_policy"))
        _take(kw, data.get("experiment", {}), "experiment",
              dict(models="models", protocols="protocols", seeds="seeds", output_dir="output_dir"))
        _take(kw, data.get("clustering", {}), "clustering",
              dict(k_grid="k_grid", restarts="restarts", fixed_k="fixed_k"))
        _take(kw, data.get("figures", {}), "figures", dict(seed="figure_seed"))
        train_keys = {f.name for f in fields(TrainConfig)} - _PER_RUN_KEYS
        extra = set(data.get("train", {})) - train_keys
        if extra:
            raise ValueError(f"unknown train key(s): {sorted(extra)}")
        kw["train"] = dict(data.get("train", {}))
        tsne_keys = {f.name for f in fields(TsneConfig)} - {"rng_seed"}
        extra = set(data.get("tsne", {})) - tsne_keys
        if extra:
            raise ValueError(f"unknown tsne key(s): {sorted(extra)}")
        kw["tsne"] = dict(data.get("tsne", {}))
        if "lambda" in data:
            lambdas = _default_lambdas()
            for arch, by_protocol in data["lambda"].items():
                lambdas.setdefault(parse_arch(arch), {}).update(by_protocol)
            kw["lambdas"] = lambdas
        return cls(**kw)

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))

    def digest(self) -> str:
        data = self.to_dict()
        data["experiment"].pop("output_dir")  # where results land does not change them
        return _sha_text(json.dumps(data, sort_keys=True))


def _take(kw: dict, section: dict, name: str, mapping: dict) -> None:
    extra = set(section) - set(mapping)
    if extra:
        raise ValueError(f"unknown key(s) in [{name}]: {sorted(extra)}")
    for key, attr in mapping.items():
        if key in section:
            kw[attr] = section[key]


# ---------------------------------------------------------------------------
# paths and digests

def output_root(config: ExperimentConfig, override=None) -> Path:
    return Path(override or os.environ.get(OUT_ENV) or config.output_dir)


def run_name(model: str, protocol: str, seed: int) -> str:
    return f"{model}_{protocol}_{seed}"


def run_dir(root, stage: str, model: str, protocol: str, seed: int) -> Path:
    return Path(root) / stage / run_name(model, protocol, seed)


def dataset_path(root) -> Path:
    return Path(root) / "generate" / "dataset.json"


def _sha_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, data) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n")
    os.replace(tmp, path)


def _read_done(directory) -> dict | None:
    path = Path(directory) / "done.json"
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError:
        return None


def train_digest(config: ExperimentConfig, root, model: str, protocol: str, seed: int) -> str:
    path = dataset_path(root)
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run the generate stage first")
    payload = dict(dataset=sha256_file(path), model=model, protocol=protocol, seed=seed,
                   train=asdict(config.train_config(model, protocol, seed)))
    return _sha_text(json.dumps(payload, sort_keys=True, default=list))


def _train_complete(config, root, model, protocol, seed) -> bool:
    d = run_dir(root, "train", model, protocol, seed)
    done = _read_done(d)
    return (done is not None and done.get("digest") == train_digest(config, root, model, protocol, seed)
            and (d / "checkpoint.npz").exists()
            and sha256_file(d / "checkpoint.npz") == done.get("checkpoint_sha256"))


def _map(fn, tasks, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------------------
# stages

def cmd_generate(config: ExperimentConfig, root) -> Path:
    bundle = generate_synthetic_dataset(config.n, config.reps, config.k, config.data_seed,
                                        extra_groups=config.n_extra_groups, extra_policy=config.extra_policy)
    out = Path(root) / "generate"
    out.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, out / "dataset.json")
    export_csv(bundle, out)
    log.info("dataset: n=%d m=%d interactions=%d", bundle.n, bundle.m, len(bundle.interactions))
    return out / "dataset.json"


def _train_one(task) -> tuple:
    config_dict, root, model, protocol, seed = task
    config = ExperimentConfig.from_dict(config_dict)
    name = run_name(model, protocol, seed)
    if _train_complete(config, root, model, protocol, seed):
        return name, "skipped"
    digest = train_digest(config, root, model, protocol, seed)
    d = run_dir(root, "train", model, protocol, seed)
    d.mkdir(parents=True, exist_ok=True)
    (d / "done.json").unlink(missing_ok=True)
    bundle = load_bundle(dataset_path(root))
    plan = make_split(bundle, protocol, seed)
    save_split(plan, d / "split.json")
    tc = config.train_config(model, protocol, seed)
    state, trainlog = train(bundle, plan, model, tc)
    save_checkpoint(d / "checkpoint.npz", state, tc, tc.epochs)
    trainlog.write_csv(d / "trainlog.csv")
    _write_json(d / "done.json", dict(digest=digest, checkpoint_sha256=sha256_file(d / "checkpoint.npz"),
                                      final_loss=trainlog.losses[-1]))
    return name, "trained"


def cmd_train(config: ExperimentConfig, root, jobs: int = 1) -> list:
    """Train every cell of the matrix; returns [(run name, "trained" | "skipped")]."""
    tasks = [(config.to_dict(), str(root), m, p, s) for m, p, s in config.runs()]
    results = _map(_train_one, tasks, jobs)
    trained = sum(status == "trained" for _, status in results)
    log.info("train: %d trained, %d already complete", trained, len(results) - trained)
    return results


def _require_trained(config, root, runs) -> None:
    missing = [run_name(*r) for r in runs if not _train_complete(config, root, *r)]
    if missing:
        raise MissingRuns(missing)


def _evaluate_one(task) -> str:
    config_dict, root, model, protocol, seed = task
    src = run_dir(root, "train", model, protocol, seed)
    dst = run_dir(root, "evaluate", model, protocol, seed)
    dst.mkdir(parents=True, exist_ok=True)
    bundle = load_bundle(dataset_path(root))
    state, _ = load_checkpoint(src / "checkpoint.npz")
    plan = load_split(src / "split.json")
    sets = build_candidate_sets(plan, "test", bundle.m, stream_seed(seed, STREAM_TEST, protocol))
    report = evaluate(state, sets, bundle.user_matrix(), model, protocol, seed)
    save_report(report, dst / "eval_report.json")
    return run_name(model, protocol, seed)


def cmd_evaluate(config: ExperimentConfig, root, jobs: int = 1) -> list:
    runs = config.runs()
    _require_trained(config, root, runs)
    return _map(_evaluate_one, [(config.to_dict(), str(root), *r) for r in runs], jobs)


def _user_embeddings(state, representation: str):
    return state.main_embeddings("user") if representation == "main" else state.pl_embeddings("user")


def _cluster_one(task) -> str:
    config_dict, root, model, protocol, seed = task
    config = ExperimentConfig.from_dict(config_dict)
    state, _ = load_checkpoint(run_dir(root, "train", model, protocol, seed) / "checkpoint.npz")
    dst = run_dir(root, "cluster", model, protocol, seed)
    dst.mkdir(parents=True, exist_ok=True)
    if protocol == LEAVE_ONE_OUT:
        reps = ("main", "pl") if state.has_pl else ("main",)
        for entity in ("user", "group"):
            for rep in reps:
                emb = state.main_embeddings(entity) if rep == "main" else state.pl_embeddings(entity)
                grid = optimal_k_scan(emb, config.k_grid, rng_seed=seed, restarts=config.restarts)
                save_cluster_report(ClusterReport(model, seed, entity, rep, grid),
                                    dst / f"silhouette_{entity}_{rep}.json")
    # the separability series uses one fixed k on the user main embeddings
    emb = state.main_embeddings("user")
    fit = spherical_kmeans(emb, config.fixed_k, rng_seed=[seed, config.fixed_k], restarts=config.restarts)
    _write_json(dst / "fixed_k.json", dict(model=model, protocol=protocol, seed=seed, k=config.fixed_k,
                                           entity="user", representation="main",
                                           silhouette=cosine_silhouette(emb, fit.labels)))
    return run_name(model, protocol, seed)


def cmd_cluster(config: ExperimentConfig, root, jobs: int = 1) -> list:
    runs = config.runs()
    _require_trained(config, root, runs)
    return _map(_cluster_one, [(config.to_dict(), str(root), *r) for r in runs], jobs)


def _panel(config, root, model, rep, seed):
    src = run_dir(root, "train", model, LEAVE_ONE_OUT, seed)
    labels_path = run_dir(root, "cluster", model, LEAVE_ONE_OUT, seed) / f"silhouette_user_{rep}.json"
    if not labels_path.exists() or not (src / "checkpoint.npz").exists():
        raise MissingRuns([f"{run_name(model, LEAVE_ONE_OUT, seed)} ({labels_path.name})"])
    state, _ = load_checkpoint(src / "checkpoint.npz")
    labels = load_cluster_report(labels_path).grid.chosen_labels
    projection = tsne_project(_user_embeddings(state, rep), TsneConfig(**config.tsne, rng_seed=seed), labels)
    dst = run_dir(root, "visualize", model, LEAVE_ONE_OUT, seed)
    dst.mkdir(parents=True, exist_ok=True)
    title = f"{display_name(model)}: {'main' if rep == 'main' else 'PL-specific'} user embeddings"
    emit_overlay_figure(projection, dst / f"{model}_user_{rep}_{seed}.svg", title)
    write_coords(projection, dst / "tsne_coords.csv")
    with open(dst / "tsne_kl.csv", "w") as fh:
        fh.write("iteration,kl\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(projection.kl_history))
    return projection, title


_CAPTION = ("t-SNE of user embeddings (leave-one-out, seed {seed}). Colors are spherical k-means "
            "clusters found in the original embedding space.")


def cmd_visualize(config: ExperimentConfig, root) -> list:
    """Per-panel overlays plus the composite pair and grid figures; returns written figure paths."""
    if LEAVE_ONE_OUT not in config.protocols:
        log.info("visualize: leave-one-out not in protocols, nothing to draw")
        return []
    seed = config.visual_seed
    figdir = Path(root) / "visualize" / "figures"
    figdir.mkdir(parents=True, exist_ok=True)
    written = []
    for panels, name in ((FIG_PAIR, "neumf_user_tsne"), (FIG_GRID, "mf_mlp_user_tsne")):
        if not all(model in config.models for model, _ in panels):
            log.info("visualize: skipping %s (models not in config)", name)
            continue
        drawn = [_panel(config, root, model, rep, seed) for model, rep in panels]
        projections = [p for p, _ in drawn]
        titles = [t for _, t in drawn]
        path = figdir / f"{name}_{seed}.svg"
        caption = _CAPTION.format(seed=seed)
        if len(projections) == 2:
            emit_pair_figure(projections[0], projections[1], path, titles, caption)
        else:
            emit_grid_figure(projections, path, titles, caption)
        written.append(path)
    return written


def _gather_reports(config, root) -> dict:
    missing, reports = [], {p: [] for p in config.protocols}
    for model, protocol, seed in config.runs():
        path = run_dir(root, "evaluate", model, protocol, seed) / "eval_report.json"
        if path.exists():
            reports[protocol].append(load_report(path))
        else:
            missing.append(f"{run_name(model, protocol, seed)} (eval_report.json)")
    clusters, fixed = [], {p: [] for p in config.protocols}
    for model, protocol, seed in config.runs():
        d = run_dir(root, "cluster", model, protocol, seed)
        if not (d / "fixed_k.json").exists():
            missing.append(f"{run_name(model, protocol, seed)} (fixed_k.json)")
        else:
            fixed[protocol].append(json.loads((d / "fixed_k.json").read_text()))
        if protocol != LEAVE_ONE_OUT:
            continue
        reps = ("main", "pl") if model in PL_ARCHS else ("main",)
        for entity in ("user", "group"):
            for rep in reps:
                path = d / f"silhouette_{entity}_{rep}.json"
                if path.exists():
                    clusters.append(load_cluster_report(path))
                else:
                    missing.append(f"{run_name(model, protocol, seed)} ({path.name})")
    if missing:
        raise MissingRuns(missing)
    return dict(reports=reports, clusters=clusters, fixed=fixed)


def cmd_report(config: ExperimentConfig, root) -> dict:
    """Tables 1-3, the separability correlation per protocol, and the figures."""
    found = _gather_reports(config, root)
    out = Path(root) / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    for protocol, table in ((LEAVE_ONE_OUT, "table1.csv"), (RATIO, "table2.csv")):
        if protocol in config.protocols:
            write_metric_table(aggregate_seeds(found["reports"][protocol]), out / table, models=config.models)
            written[table] = out / table
    if LEAVE_ONE_OUT in config.protocols:
        write_table(build_table3(found["clusters"], models=config.models), out / "table3.csv")
        written["table3.csv"] = out / "table3.csv"
    spearman = {}
    for protocol in config.protocols:
        hr = {(r.model, r.seed): r.hr_at_5 for r in found["reports"][protocol]}
        pairs = sorted((f["model"], f["seed"], f["silhouette"], hr[(f["model"], f["seed"])])
                       for f in found["fixed"][protocol])
        spearman[protocol] = dict(
            rho=spearman_rho([p[2] for p in pairs], [p[3] for p in pairs]),
            n_runs=len(pairs), k=config.fixed_k, entity="user", representation="main",
            runs=[dict(model=m, seed=s, silhouette=sil, hr_at_5=h) for m, s, sil, h in pairs],
        )
    _write_json(out / "spearman.json", spearman)
    written["spearman.json"] = out / "spearman.json"
    for path in cmd_visualize(config, root):
        written[path.name] = path
    for protocol, entry in spearman.items():
        log.info("spearman %s: rho=%.4f over %d runs", protocol, entry["rho"], entry["n_runs"])
    return written


# ---------------------------------------------------------------------------
# manifest

def write_manifest(config: ExperimentConfig, root, stage: str, seconds: float) -> Path:
    root = Path(root)
    path = root / MANIFEST
    previous = json.loads(path.read_text()) if path.exists() else {}
    timings = previous.get("stage_seconds", {})
    timings[stage] = round(seconds, 3)
    files = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != MANIFEST and not p.name.endswith(".tmp"):
            files[p.relative_to(root).as_posix()] = sha256_file(p)
    manifest = dict(tool_version=__version__, config_hash=config.digest(), config=config.to_dict(),
                    seeds=list(config.seeds), n_runs=len(config.runs()), stage_seconds=timings, files=files)
    _write_json(path, manifest)
    return path


def run_stage(stage: str, config: ExperimentConfig, root, jobs: int = 1):
    """Run one stage, then refresh the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    if stage == "generate":
        result = cmd_generate(config, root)
    elif stage == "train":
        result = cmd_train(config, root, jobs)
    elif stage == "evaluate":
        result = cmd_evaluate(config, root, jobs)
    elif stage == "cluster":
        result = cmd_cluster(config, root, jobs)
    elif stage == "visualize":
        result = cmd_visualize(config, root)
    elif stage == "report":
        result = cmd_report(config, root)
    else:
        raise ValueError(f"unknown stage {stage!r}")
    write_manifest(config, root, stage, time.perf_counter() - start)
    return result


def run_all(config: ExperimentConfig, root, jobs: int = 1) -> dict:
    """Every stage in order; returns the report outputs."""
    result = None
    for stage in ("generate", "train", "evaluate", "cluster", "report"):
        result = run_stage(stage, config, root, jobs)
    return result
