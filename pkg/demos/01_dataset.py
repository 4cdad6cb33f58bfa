"""Build the canonical synthetic survey population and look at its groups.

Run: python demos/01_dataset.py
"""
import numpy as np

from plncf.dataset import CANONICAL, align_features, generate_synthetic_dataset

bundle = generate_synthetic_dataset(rng_seed=0, **CANONICAL)
print(f"users={bundle.n} groups={bundle.m} interactions={len(bundle.interactions)}")

X, Z = bundle.user_matrix(), bundle.group_matrix()
print("feature dim:", X.shape[1])
# each survey block lives on its own simplex
print("q33 block sums:", np.unique(np.round(X[:, :6].sum(axis=1), 12)))
print("q26 block sums:", np.unique(np.round(X[:, 6:].sum(axis=1), 12)))

# soft labels: how well a user's answers align with the group they joined
soft = np.array([it.align for it in bundle.interactions])
print(f"soft labels: min={soft.min():.3f} mean={soft.mean():.3f} max={soft.max():.3f}")

# a random user-group pair is typically less aligned than an observed one
rng = np.random.default_rng(1)
rand = [align_features(X[u], Z[g]) for u, g in zip(rng.integers(bundle.n, size=2000), rng.integers(bundle.m, size=2000))]
print(f"random pairs: mean align={np.mean(rand):.3f}")
