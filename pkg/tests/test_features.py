"""Tests for RBF feature maps, injectivity certificates, and feature CSV IO."""

import math

import numpy as np
import pytest

from fvi_bench import features
from fvi_bench.errors import (
    DimensionMismatchError,
    NonFiniteValueError,
    ParseError,
    UnknownInputError,
)
from fvi_bench.features import (
    FeatureMatrix,
    RbfFeatureMap,
    evaluate,
    fit_rbf_featurizer,
    independent_rows,
    injectivity_certificate,
    load_features,
    save_features,
)


def toy_feature_map() -> RbfFeatureMap:
    """20 linearly spaced centers in [-2, 2], shared lengthscale 0.2."""
    return RbfFeatureMap(np.linspace(-2.0, 2.0, 20).reshape(-1, 1), np.array([0.2]))


class TestEvaluate:
    def test_feature_is_one_at_its_center(self):
        fmap = RbfFeatureMap(np.array([[0.3, -0.7]]), np.array([0.5, 1.5]))
        out = evaluate(fmap, np.array([[0.3, -0.7]]))
        assert out.values[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_hand_evaluated_1d_value(self):
        fmap = RbfFeatureMap(np.array([[0.0]]), np.array([0.2]))
        out = evaluate(fmap, np.array([[0.2]]))
        assert out.values[0, 0] == pytest.approx(math.exp(-0.5), abs=1e-12)
        assert out.values[0, 0] == pytest.approx(0.60653, abs=5e-6)

    def test_toy_centers_give_unit_diagonal(self):
        fmap = toy_feature_map()
        out = evaluate(fmap, fmap.centers)
        np.testing.assert_allclose(np.diag(out.values), np.ones(20), atol=1e-12)

    def test_values_in_unit_interval_and_one_only_at_center(self):
        rng = np.random.default_rng(0)
        fmap = RbfFeatureMap(rng.standard_normal((5, 3)), rng.uniform(0.5, 2.0, 3))
        points = rng.standard_normal((40, 3))
        out = evaluate(fmap, points).values
        assert np.all(out > 0.0) and np.all(out <= 1.0)
        assert not np.any(out == 1.0)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(1)
        fmap = RbfFeatureMap(rng.standard_normal((4, 2)), np.array([1.0, 1.0]))
        points = rng.standard_normal((10, 2))
        perm = rng.permutation(10)
        np.testing.assert_allclose(
            evaluate(fmap, points).values[perm], evaluate(fmap, points[perm]).values
        )

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(2)
        fmap = RbfFeatureMap(rng.standard_normal((6, 2)), rng.uniform(0.3, 2.0, 2))
        points = rng.standard_normal((7, 2))
        direct = np.empty((7, 6))
        for i, x in enumerate(points):
            for j, c in enumerate(fmap.centers):
                direct[i, j] = math.exp(-0.5 * float(np.sum(((x - c) / fmap.lengthscales) ** 2)))
        np.testing.assert_allclose(evaluate(fmap, points).values, direct, rtol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            evaluate(toy_feature_map(), np.zeros((3, 2)))

    def test_invalid_lengthscale_rejected(self):
        with pytest.raises(ValueError):
            RbfFeatureMap(np.zeros((2, 1)), np.array([0.0]))


class TestInjectivityCertificate:
    def test_toy_map_at_own_centers_is_full_rank(self):
        fmap = toy_feature_map()
        cert = injectivity_certificate(fmap, fmap.centers)
        assert cert.certified_rank == 20
        assert cert.witness_subset is not None and len(cert.witness_subset) == 20
        # SVD oracle: the witness rows really are linearly independent.
        witness_feats = evaluate(fmap, fmap.centers[cert.witness_subset]).values
        sv = np.linalg.svd(witness_feats, compute_uv=False)
        assert sv[-1] > 1e-8 * sv[0]

    def test_duplicate_points_rank_one(self):
        fmap = RbfFeatureMap(np.array([[0.0], [1.0]]), np.array([1.0]))
        cert = injectivity_certificate(fmap, np.array([[0.5], [0.5]]))
        assert cert.certified_rank == 1
        assert cert.witness_subset is None

    def test_fewer_points_than_features(self):
        fmap = RbfFeatureMap(np.linspace(0, 1, 5).reshape(-1, 1), np.array([0.3]))
        cert = injectivity_certificate(fmap, np.array([[0.1], [0.9]]))
        assert cert.certified_rank == 2
        assert cert.witness_subset is None

    def test_witness_full_rank_on_random_instances(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            k = int(rng.integers(2, 8))
            fmap = RbfFeatureMap(
                np.sort(rng.uniform(-2, 2, k)).reshape(-1, 1), np.array([0.4])
            )
            candidates = rng.uniform(-2.5, 2.5, (3 * k, 1))
            cert = injectivity_certificate(fmap, candidates)
            if cert.witness_subset is None:
                continue
            sub = evaluate(fmap, candidates[cert.witness_subset]).values
            sv = np.linalg.svd(sub, compute_uv=False)
            assert sv[-1] > 1e-8 * sv[0]


class TestIndependentRows:
    def test_drops_duplicate_row(self):
        m = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        kept = independent_rows(m)
        assert len(kept) == 2
        sv = np.linalg.svd(m[kept], compute_uv=False)
        assert sv[-1] > 1e-8 * sv[0]

    def test_full_rank_keeps_all(self):
        rng = np.random.default_rng(4)
        m = rng.standard_normal((4, 6))
        np.testing.assert_array_equal(independent_rows(m), np.arange(4))


class TestFeatureCsv:
    def test_identity_round(self, tmp_path):
        path = tmp_path / "feat.csv"
        path.write_text("1,0\n0,1\n")
        matrix, stub = load_features(path)
        np.testing.assert_array_equal(matrix.values, np.eye(2))
        assert stub.num_features == 2

    def test_nan_rejected(self, tmp_path):
        path = tmp_path / "feat.csv"
        path.write_text("1,nan\n0,1\n")
        with pytest.raises(NonFiniteValueError):
            load_features(path)

    def test_parse_error_reports_location(self, tmp_path):
        path = tmp_path / "feat.csv"
        path.write_text("# header\n1,2\n3,oops\n")
        with pytest.raises(ParseError) as err:
            load_features(path)
        assert err.value.row == 3

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        original = FeatureMatrix(rng.standard_normal((8, 3)), rng.standard_normal((8, 2)))
        path = tmp_path / "feat.csv"
        save_features(original, path)
        loaded, stub = load_features(path)
        np.testing.assert_array_equal(loaded.values, original.values)
        np.testing.assert_array_equal(loaded.source_inputs, original.source_inputs)
        np.testing.assert_array_equal(stub(original.source_inputs), original.values)

    def test_stub_rejects_unknown_rows(self, tmp_path):
        rng = np.random.default_rng(6)
        original = FeatureMatrix(rng.standard_normal((4, 2)), rng.standard_normal((4, 2)))
        path = tmp_path / "feat.csv"
        save_features(original, path)
        _, stub = load_features(path)
        with pytest.raises(UnknownInputError):
            stub(np.array([[100.0, 100.0]]))


class TestFeaturizer:
    def test_centers_and_lengthscales_shapes(self):
        rng = np.random.default_rng(7)
        inputs = rng.standard_normal((200, 3))
        fmap = fit_rbf_featurizer(inputs, num_centers=10, rng=np.random.default_rng(0))
        assert fmap.centers.shape == (10, 3)
        assert np.all(fmap.lengthscales > 0.0)

    def test_constant_dimension_gets_unit_lengthscale(self):
        inputs = np.column_stack([np.linspace(0, 1, 50), np.zeros(50)])
        scales = features.median_heuristic_lengthscales(inputs)
        assert scales[1] == 1.0
        assert scales[0] > 0.0
