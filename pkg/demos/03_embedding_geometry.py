"""Cluster and project the user embeddings of a trained PL model.

Compares the silhouette of the main embeddings with the PL-specific ones and
writes a t-SNE overlay figure to the current directory.

Run: python demos/03_embedding_geometry.py
"""
from plncf.clustering import optimal_k_scan
from plncf.dataset import CANONICAL, generate_synthetic_dataset
from plncf.splits import LEAVE_ONE_OUT, make_split
from plncf.training import TrainConfig, lambda_for, train
from plncf.visualization import TsneConfig, emit_pair_figure, tsne_project

seed = 42
bundle = generate_synthetic_dataset(rng_seed=0, **CANONICAL)
plan = make_split(bundle, LEAVE_ONE_OUT, seed)
config = TrainConfig(seed=seed, lambda_pl=lambda_for("NeuMF_PL", LEAVE_ONE_OUT), validate=False)
state, _ = train(bundle, plan, "NeuMF_PL", config)

projections = []
for rep, emb in (("main", state.main_embeddings("user")), ("pl", state.pl_embeddings("user"))):
    grid = optimal_k_scan(emb, rng_seed=seed)
    scores = " ".join(f"k{k}={v:.3f}" for k, v in grid.scores.items())
    print(f"{rep:4s} chosen k={grid.chosen_k} silhouette={grid.chosen_score:.4f}  [{scores}]")
    proj = tsne_project(emb, TsneConfig(rng_seed=seed), grid.chosen_labels)
    print(f"     t-SNE KL {proj.kl_history[0]:.3f} -> {proj.kl_history[-1]:.3f}")
    projections.append(proj)

emit_pair_figure(*projections, "neumf_pl_users.svg", ("NeuMF-PL main", "NeuMF-PL PL-specific"))
print("wrote neumf_pl_users.svg")
