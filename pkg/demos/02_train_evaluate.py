"""Train a baseline and its PL variant on one leave-one-out split and compare.

Run: python demos/02_train_evaluate.py [epochs]
"""
import sys

from plncf.dataset import CANONICAL, generate_synthetic_dataset
from plncf.evaluation import evaluate
from plncf.splits import LEAVE_ONE_OUT, build_candidate_sets, make_split
from plncf.training import STREAM_TEST, TrainConfig, lambda_for, stream_seed, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20
seed = 42
bundle = generate_synthetic_dataset(rng_seed=0, **CANONICAL)
plan = make_split(bundle, LEAVE_ONE_OUT, seed)
test_sets = build_candidate_sets(plan, "test", bundle.m, stream_seed(seed, STREAM_TEST, LEAVE_ONE_OUT))

for arch in ("MF", "MF_PL", "NeuMF", "NeuMF_PL"):
    config = TrainConfig(epochs=epochs, seed=seed, lambda_pl=lambda_for(arch, LEAVE_ONE_OUT))
    state, log = train(bundle, plan, arch, config)
    report = evaluate(state, test_sets, bundle.user_matrix(), arch, LEAVE_ONE_OUT, seed)
    print(f"{arch:9s} lambda={config.lambda_pl:.2f} loss {log.losses[0]:8.1f} -> {log.losses[-1]:8.1f}"
          f"  HR@5={report.hr_at_5:5.2f}%  NDCG@5={report.ndcg_at_5:5.2f}%")
