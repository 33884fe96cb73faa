"""Latent-space and imputation metrics against brute-force oracles."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference_impls as ref
from crossvi import metrics
from crossvi.errors import ContractError


class TestKnnGraph:
    def test_matches_brute_force_on_random_points(self):
        rng = np.random.default_rng(42)
        for n, k in [(40, 1), (40, 7), (137, 25)]:
            pts = rng.normal(size=(n, 3))
            ours = metrics.knn_graph(pts, k)
            expected = ref.knn_sets(pts, k)
            for i in range(n):
                assert list(ours[i]) == expected[i]

    def test_tie_break_by_index_on_exact_ties(self):
        # integer coordinates make distances exact; three copies of the
        # same point tie at distance 0
        pts = np.array([[0, 0], [0, 0], [0, 0], [5, 0]], dtype=float)
        nb = metrics.knn_graph(pts, 2)
        assert list(nb[0]) == [1, 2]
        assert list(nb[1]) == [0, 2]
        assert list(nb[2]) == [0, 1]
        assert list(nb[3]) == [0, 1]

    def test_never_contains_self(self):
        rng = np.random.default_rng(42)
        pts = rng.normal(size=(30, 2))
        nb = metrics.knn_graph(pts, 29)
        for i in range(30):
            assert i not in nb[i]

    def test_k_bounds(self):
        pts = np.zeros((5, 2))
        with pytest.raises(ContractError):
            metrics.knn_graph(pts, 0)
        with pytest.raises(ContractError):
            metrics.knn_graph(pts, 5)

    def test_requires_2d(self):
        with pytest.raises(ContractError):
            metrics.knn_graph(np.zeros(5), 2)


class TestMixingKl:
    def test_balanced_square_is_exactly_zero(self):
        # unit square, labels 0,0,1,1 around the ring: each corner's two
        # nearest are its edge neighbors, one of each label, so every
        # smoothed local mix equals the global 50/50 exactly
        pts = np.array([[0.0, 0], [1, 0], [1, 1], [0, 1]])
        labels = np.array([0, 0, 1, 1])
        assert metrics.mixing_kl(pts, labels, 2) == 0.0

    def test_separated_clusters_closed_form(self):
        # every neighborhood is pure, so each cell contributes the same
        # smoothed KL, computed here directly
        n, k = 8, 3
        pts = np.vstack([np.random.default_rng(42).normal(size=(n, 2)),
                         100.0 + np.random.default_rng(43).normal(size=(n, 2))])
        labels = np.array([0] * n + [1] * n)
        eps = 1.0 / (k + 2)
        hi = (k + eps) / (k + 2 * eps)
        lo = eps / (k + 2 * eps)
        expected = -(hi * math.log(hi / 0.5) + lo * math.log(lo / 0.5))
        np.testing.assert_allclose(
            metrics.mixing_kl(pts, labels, k), expected, rtol=1e-12
        )

    def test_matches_brute_force(self):
        rng = np.random.default_rng(42)
        pts = rng.normal(size=(60, 4))
        labels = rng.integers(0, 3, size=60)
        np.testing.assert_allclose(
            metrics.mixing_kl(pts, labels, 11),
            ref.mixing_kl(pts, labels, 11),
            atol=1e-12,
        )

    def test_random_labels_score_near_zero(self):
        rng = np.random.default_rng(42)
        pts = rng.normal(size=(400, 5))
        labels = rng.integers(0, 2, size=400)
        score = metrics.mixing_kl(pts, labels, 50)
        assert -0.02 < score <= 0.0

    def test_score_never_positive(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            pts = rng.normal(size=(40, 2))
            labels = rng.integers(0, 2, size=40)
            assert metrics.mixing_kl(pts, labels, 5) <= 0.0

    def test_single_label_rejected(self):
        with pytest.raises(ContractError):
            metrics.mixing_kl(np.zeros((10, 2)), np.zeros(10), 3)


class TestPurity:
    def test_identical_embeddings_score_one(self):
        rng = np.random.default_rng(42)
        pts = rng.normal(size=(25, 3))
        assert metrics.knn_purity_jaccard(pts, pts.copy(), 6) == 1.0

    def test_fully_disjoint_neighbor_sets_score_zero(self):
        # k=1: in a the pairs are (0,1) and (2,3); in b they are (0,2)
        # and (1,3)
        a = np.array([[0.0], [1.0], [10.0], [11.0]])
        b = np.array([[0.0], [10.0], [1.0], [11.0]])
        assert metrics.knn_purity_jaccard(a, b, 1) == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(42)
        a = rng.normal(size=(45, 4))
        b = a + 0.8 * rng.normal(size=(45, 4))
        np.testing.assert_allclose(
            metrics.knn_purity_jaccard(a, b, 9),
            ref.knn_purity_jaccard(a, b, 9),
            atol=1e-12,
        )

    def test_rigid_motion_invariance(self):
        rng = np.random.default_rng(42)
        a = rng.normal(size=(30, 3))
        b = rng.normal(size=(30, 3))
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        base = metrics.knn_purity_jaccard(a, b, 5)
        moved = metrics.knn_purity_jaccard(a @ q + 7.0, b, 5)
        np.testing.assert_allclose(moved, base, atol=1e-12)

    def test_row_count_mismatch(self):
        with pytest.raises(ContractError):
            metrics.knn_purity_jaccard(np.zeros((4, 2)), np.zeros((5, 2)), 2)


class TestSpearman:
    def test_perfect_and_reversed(self):
        a = np.array([1.0, 2.0, 3.0, 4.0])
        assert metrics.spearman(a, 2 * a + 5) == 1.0
        assert metrics.spearman(a, -a) == -1.0

    def test_tied_example_known_value(self):
        # scipy.stats.spearmanr([1,2,3,4,5], [5,6,7,8,7])
        rho = metrics.spearman(
            np.array([1.0, 2, 3, 4, 5]), np.array([5.0, 6, 7, 8, 7])
        )
        np.testing.assert_allclose(rho, 0.8207826816681233, rtol=1e-12)

    def test_scipy_agreement_with_ties(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            a = rng.integers(0, 8, size=50).astype(float)
            b = rng.integers(0, 8, size=50).astype(float)
            expected = ref.spearman(a, b)
            got = metrics.spearman(a, b)
            if expected is None:
                assert got is None
            else:
                np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_constant_vector_is_undefined(self):
        assert metrics.spearman(np.ones(5), np.arange(5.0)) is None

    def test_input_validation(self):
        with pytest.raises(ContractError):
            metrics.spearman(np.zeros(3), np.zeros(4))
        with pytest.raises(ContractError):
            metrics.spearman(np.zeros(2), np.zeros(2))

    @given(
        st.integers(3, 40).flatmap(
            lambda n: st.tuples(
                st.lists(st.integers(-5, 5), min_size=n, max_size=n),
                st.lists(st.integers(-5, 5), min_size=n, max_size=n),
            )
        )
    )
    @settings(max_examples=60, deadline=None)
    def test_invariant_under_monotone_transforms(self, pair):
        a = np.array(pair[0], dtype=float)
        b = np.array(pair[1], dtype=float)
        base = metrics.spearman(a, b)
        for ta in (np.exp(a), 3.0 * a + 2.0, a**3):
            got = metrics.spearman(ta, b)
            assert got == base


class TestRelativeChange:
    def test_identity_is_zero(self):
        scores = {"a": 0.5, "b": -0.2}
        rc = metrics.relative_change(scores, dict(scores))
        assert rc.median == 0.0
        assert rc.n_excluded == 0

    def test_doubling_is_plus_one(self):
        rc = metrics.relative_change({"a": 0.8}, {"a": 0.4})
        np.testing.assert_allclose(rc.per_gene["a"], 1.0, rtol=1e-12)

    def test_mixed_sign_arithmetic(self):
        rc = metrics.relative_change(
            {"a": 0.1, "b": -0.3}, {"a": -0.2, "b": -0.6}
        )
        # (0.1 - (-0.2)) / 0.2 = 1.5 ; (-0.3 - (-0.6)) / 0.6 = 0.5
        np.testing.assert_allclose(rc.per_gene["a"], 1.5, rtol=1e-12)
        np.testing.assert_allclose(rc.per_gene["b"], 0.5, rtol=1e-12)
        np.testing.assert_allclose(rc.median, 1.0, rtol=1e-12)

    def test_exclusions_counted(self):
        rc = metrics.relative_change(
            {"a": 0.5, "b": None, "c": 0.2, "d": 0.1},
            {"a": 1e-9, "b": 0.5, "c": 0.4, "d": None},
        )
        assert rc.n_excluded == 3
        assert list(rc.per_gene) == ["c"]

    def test_all_excluded_gives_nan_median(self):
        rc = metrics.relative_change({"a": 0.5}, {"a": 0.0})
        assert math.isnan(rc.median)

    def test_disjoint_genes_rejected(self):
        with pytest.raises(ContractError):
            metrics.relative_change({"a": 1.0}, {"b": 1.0})


class TestSweepAndReport:
    def test_default_k_sweep_clipping(self):
        assert metrics.default_k_sweep(1000) == [10, 20, 50, 100, 200]
        assert metrics.default_k_sweep(60) == [10, 20, 50, 59]
        assert metrics.default_k_sweep(15) == [10, 14]
        assert metrics.default_k_sweep(2) == [1]
        with pytest.raises(ContractError):
            metrics.default_k_sweep(1)

    def test_report_round_trip(self, tmp_path):
        rep = metrics.EvalReport()
        rep.add_metric("mixing_kl", 10, -0.25)
        rep.add_gene("g1", "model", 0.8, delta_rho=0.1)
        rep.add_gene("g2", "model", None)
        rep.summary["median_spearman_model"] = 0.8
        jp, mp, gp = (tmp_path / "r.json", tmp_path / "m.csv", tmp_path / "g.csv")
        rep.write(jp, mp, gp)
        doc = json.loads(jp.read_text())
        assert doc["summary"]["median_spearman_model"] == 0.8
        lines = gp.read_text().splitlines()
        assert lines[0].startswith("gene")
        # undefined scores serialize as empty cells
        assert any(",," in line or line.endswith(",") for line in lines[1:])
        assert len(mp.read_text().splitlines()) == 2
