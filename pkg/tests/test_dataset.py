import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plncf.dataset import (
    CANONICAL,
    align_features,
    build_group_profile,
    export_csv,
    generate_synthetic_dataset,
    load_bundle,
    normalize_survey,
    save_bundle,
)
from plncf.errors import AllZeroBlock, InsufficientUsers, NegativeEntry, SchemaError, ZeroVector


def cosine_oracle(x, z):
    dot = sum(a * b for a, b in zip(x, z))
    return dot / (math.sqrt(sum(a * a for a in x)) * math.sqrt(sum(b * b for b in z)))


@pytest.fixture(scope="module")
def canonical():
    return generate_synthetic_dataset(rng_seed=0, **CANONICAL)


class TestNormalizeSurvey:
    def test_uniform_block(self):
        sv = normalize_survey([1] * 6, [1] * 10)
        assert sv.q33 == tuple([1 / 6] * 6)

    def test_simplex_vertex(self):
        sv = normalize_survey([1] * 6, [10] + [0] * 9)
        assert sv.q26 == (1.0,) + (0.0,) * 9

    def test_hand_computed(self):
        sv = normalize_survey([2, 1, 1, 0, 0, 0], [1] * 10)
        assert sv.q33 == (0.5, 0.25, 0.25, 0.0, 0.0, 0.0)

    def test_blocks_independent(self):
        sv = normalize_survey([3] * 6, [7] * 10)
        assert math.isclose(sum(sv.q33), 1.0, abs_tol=1e-9)
        assert math.isclose(sum(sv.q26), 1.0, abs_tol=1e-9)

    def test_all_zero_block(self):
        with pytest.raises(AllZeroBlock):
            normalize_survey([0] * 6, [1] * 10)

    def test_negative_entry(self):
        with pytest.raises(NegativeEntry):
            normalize_survey([1, -1, 1, 1, 1, 1], [1] * 10)


class TestAlignFeatures:
    def test_identical(self):
        x = np.arange(1, 17, dtype=float)
        assert align_features(x, x) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        x = np.zeros(16)
        z = np.zeros(16)
        x[0], z[1] = 1.0, 1.0
        assert align_features(x, z) == 0.5

    def test_opposite(self):
        x = np.linspace(0.1, 1.6, 16)
        assert align_features(x, -x) == pytest.approx(0.0, abs=1e-15)

    def test_matches_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            x, z = rng.normal(size=16), rng.normal(size=16)
            assert abs(align_features(x, z) - (cosine_oracle(x, z) + 1) / 2) < 1e-12

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            align_features(np.zeros(16), np.ones(16))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, seed, a, b):
        rng = np.random.default_rng(seed)
        x, z = rng.random(16) + 1e-3, rng.random(16) + 1e-3
        assert align_features(a * x, b * z) == pytest.approx(align_features(x, z), abs=1e-12)


class TestGroupProfile:
    def test_identical_users(self):
        users = [normalize_survey([1, 2, 3, 4, 5, 6], [1] * 10, user_id=i) for i in range(8)]
        g = build_group_profile(3, users, k=6)
        np.testing.assert_allclose(g.vector, users[0].vector, atol=1e-15)

    def test_k1_is_self(self):
        rng = np.random.default_rng(0)
        users = [normalize_survey(rng.random(6), rng.random(10), user_id=i) for i in range(5)]
        g = build_group_profile(2, users, k=1)
        np.testing.assert_array_equal(g.vector, users[2].vector)

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(11)
        users = [normalize_survey(rng.random(6), rng.random(10), user_id=i) for i in range(10)]
        vecs = [list(u.q33 + u.q26) for u in users]
        for seed in range(10):
            others = sorted((1 - cosine_oracle(vecs[seed], vecs[j]), j) for j in range(10) if j != seed)
            members = [seed] + [j for _, j in others[:5]]
            expected = [sum(vecs[j][d] for j in members) / 6 for d in range(16)]
            got = build_group_profile(seed, users, k=6)
            np.testing.assert_allclose(got.vector, expected, atol=1e-12)

    def test_skip_shifts_neighbourhood(self):
        rng = np.random.default_rng(3)
        users = [normalize_survey(rng.random(6), rng.random(10), user_id=i) for i in range(12)]
        a = build_group_profile(0, users, k=6, skip=0)
        b = build_group_profile(0, users, k=6, skip=1)
        assert a.features != b.features

    def test_insufficient_users(self):
        users = [normalize_survey([1] * 6, [1] * 10, user_id=i) for i in range(4)]
        with pytest.raises(InsufficientUsers):
            build_group_profile(0, users, k=6)


class TestGenerator:
    def test_canonical_counts(self, canonical):
        assert canonical.n == 165
        assert canonical.m == 498
        counts = np.bincount([it.user_id for it in canonical.interactions], minlength=165)
        assert np.all(counts == 3)
        assert len(canonical.interactions) == 495

    def test_keep_policy_gives_498_memberships(self):
        b = generate_synthetic_dataset(165, 3, 6, 0, extra_groups=3, extra_policy="keep")
        assert b.m == 498 and len(b.interactions) == 498

    def test_whole_population_neighbourhood(self):
        b = generate_synthetic_dataset(6, 1, 6, 5)
        assert b.m == 6
        mean = b.user_matrix().mean(axis=0)
        for g in b.groups:
            np.testing.assert_allclose(g.vector, mean, atol=1e-15)

    def test_deterministic(self, canonical):
        again = generate_synthetic_dataset(rng_seed=0, **CANONICAL)
        assert again == canonical

    def test_no_duplicate_pairs(self, canonical):
        pairs = [(it.user_id, it.group_id) for it in canonical.interactions]
        assert len(pairs) == len(set(pairs))

    def test_align_recomputes(self, canonical):
        X, Z = canonical.user_matrix(), canonical.group_matrix()
        for it in canonical.interactions:
            assert abs(align_features(X[it.user_id], Z[it.group_id]) - it.align) < 1e-9

    def test_group_blocks_on_simplex(self, canonical):
        Z = canonical.group_matrix()
        np.testing.assert_allclose(Z[:, :6].sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(Z[:, 6:].sum(axis=1), 1.0, atol=1e-9)
        assert np.all(Z >= 0)

    def test_user_blocks_on_simplex(self, canonical):
        X = canonical.user_matrix()
        np.testing.assert_allclose(X[:, :6].sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(X[:, 6:].sum(axis=1), 1.0, atol=1e-9)


class TestSerialization:
    def test_round_trip(self, canonical, tmp_path):
        path = tmp_path / "dataset.json"
        save_bundle(canonical, path)
        assert load_bundle(path) == canonical

    def test_top_level_keys(self, canonical, tmp_path):
        path = tmp_path / "dataset.json"
        save_bundle(canonical, path)
        data = json.loads(path.read_text())
        assert set(data) == {"users", "groups", "interactions", "meta"}
        assert {"n", "m", "k", "reps", "rng_seed", "generator_version"} <= set(data["meta"])

    def test_missing_interactions(self, canonical, tmp_path):
        path = tmp_path / "dataset.json"
        save_bundle(canonical, path)
        data = json.loads(path.read_text())
        del data["interactions"]
        path.write_text(json.dumps(data))
        with pytest.raises(SchemaError):
            load_bundle(path)

    def test_tampered_align(self, canonical, tmp_path):
        path = tmp_path / "dataset.json"
        save_bundle(canonical, path)
        data = json.loads(path.read_text())
        data["interactions"][10]["align"] += 1e-5
        path.write_text(json.dumps(data))
        with pytest.raises(SchemaError):
            load_bundle(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "dataset.json"
        path.write_text("{not json")
        with pytest.raises(SchemaError):
            load_bundle(path)

    def test_csv_export(self, canonical, tmp_path):
        paths = export_csv(canonical, tmp_path)
        assert [p.name for p in paths] == ["users.csv", "groups.csv", "interactions.csv"]
        lines = (tmp_path / "interactions.csv").read_text().splitlines()
        assert lines[0] == "user_id,group_id,align"
        assert len(lines) == 1 + len(canonical.interactions)
