"""Density estimator tests: EM fitting, log densities, decomposition weights, files."""

import numpy as np
import pytest

from qfed.density import (
    GmmDensityModel,
    VARIANCE_FLOOR,
    gmm_fit,
    gmm_log_density,
    gmm_log_density_batch,
    load_density_model,
    mixture_weights,
    mixture_weights_from_log,
    quantum_density,
    save_density_model,
)
from qfed.qsim import StateVector, density_from_mixture


def blobs(rng, n_blobs, n_per_blob, dim, spread=4.0, sigma=0.6):
    centers = rng.normal(scale=spread, size=(n_blobs, dim))
    points = []
    for c in centers:
        points.append(c + sigma * rng.normal(size=(n_per_blob, dim)))
    return np.concatenate(points), centers


class TestGmmFit:
    def test_single_mode_closed_form(self):
        # population MLE of {0, 2}: mean 1, variance 1
        model = gmm_fit(np.array([[0.0], [2.0]]), n_modes=1, seed=0)
        assert model.means[0, 0] == pytest.approx(1.0, abs=1e-9)
        assert model.variances[0, 0] == pytest.approx(1.0, abs=1e-9)
        assert model.mix_weights[0] == pytest.approx(1.0)

    def test_one_point_per_mode_fixed_point(self):
        pts = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
        model = gmm_fit(pts, n_modes=3, seed=1)
        found = {tuple(np.round(m, 6)) for m in model.means}
        assert found == {(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)}
        np.testing.assert_allclose(model.mix_weights, 1 / 3, atol=1e-9)
        np.testing.assert_allclose(model.variances, VARIANCE_FLOOR)
        assert model.floored_modes == 3

    def test_log_likelihood_non_decreasing(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            X, _ = blobs(rng, n_blobs=3, n_per_blob=40, dim=4)
            model = gmm_fit(X, n_modes=3, seed=seed)
            trace = model.log_likelihood_trace
            assert len(trace) >= 2
            for a, b in zip(trace, trace[1:]):
                assert b >= a - 1e-9 * max(1.0, abs(a))

    def test_recovers_separated_blobs(self):
        rng = np.random.default_rng(42)
        X, centers = blobs(rng, n_blobs=2, n_per_blob=100, dim=3, spread=8.0)
        model = gmm_fit(X, n_modes=2, seed=0)
        dists = np.linalg.norm(model.means[:, None, :] - centers[None, :, :], axis=2)
        assert dists.min(axis=0).max() < 0.5
        np.testing.assert_allclose(model.mix_weights, 0.5, atol=0.05)

    def test_too_few_points(self):
        with pytest.raises(ValueError, match="distinct points"):
            gmm_fit(np.array([[1.0], [1.0]]), n_modes=2, seed=0)


class TestGmmLogDensity:
    def test_standard_normal_at_origin(self):
        model = GmmDensityModel(
            n_modes=1,
            mix_weights=np.array([1.0]),
            means=np.zeros((1, 1)),
            variances=np.ones((1, 1)),
        )
        assert gmm_log_density(model, [0.0]) == pytest.approx(np.log(1 / np.sqrt(2 * np.pi)), abs=1e-12)

    def test_shift_equivariance(self):
        rng = np.random.default_rng(3)
        X, _ = blobs(rng, 2, 30, 3)
        model = gmm_fit(X, n_modes=2, seed=0)
        x = rng.normal(size=3)
        c = 7.3
        shifted = GmmDensityModel(
            n_modes=model.n_modes,
            mix_weights=model.mix_weights,
            means=model.means + c,
            variances=model.variances,
        )
        assert gmm_log_density(shifted, x + c) == pytest.approx(
            gmm_log_density(model, x), abs=1e-9
        )

    def test_duplicate_modes_collapse(self):
        one = GmmDensityModel(
            n_modes=1, mix_weights=np.array([1.0]), means=np.array([[1.5]]),
            variances=np.array([[0.7]]),
        )
        two = GmmDensityModel(
            n_modes=2, mix_weights=np.array([0.5, 0.5]),
            means=np.array([[1.5], [1.5]]), variances=np.array([[0.7], [0.7]]),
        )
        for x in (-1.0, 0.0, 2.5):
            assert gmm_log_density(two, [x]) == pytest.approx(gmm_log_density(one, [x]), abs=1e-12)

    def test_against_direct_summation_oracle(self):
        rng = np.random.default_rng(4)
        X, _ = blobs(rng, 3, 50, 2)
        model = gmm_fit(X, n_modes=3, seed=1)
        for _ in range(20):
            x = rng.normal(scale=3.0, size=2)
            direct = 0.0
            for m in range(model.n_modes):
                diff = x - model.means[m]
                norm = np.prod(1.0 / np.sqrt(2 * np.pi * model.variances[m]))
                direct += model.mix_weights[m] * norm * np.exp(
                    -0.5 * float(np.sum(diff**2 / model.variances[m]))
                )
            assert gmm_log_density(model, x) == pytest.approx(np.log(direct), abs=1e-9)

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(5)
        X, _ = blobs(rng, 2, 30, 3)
        model = gmm_fit(X, n_modes=2, seed=2)
        queries = rng.normal(size=(6, 3))
        batch = gmm_log_density_batch(model, queries)
        for q, expected in zip(queries, batch):
            assert gmm_log_density(model, q) == pytest.approx(expected, abs=1e-12)

    def test_dimension_mismatch(self):
        model = GmmDensityModel(
            n_modes=1, mix_weights=np.array([1.0]), means=np.zeros((1, 2)),
            variances=np.ones((1, 2)),
        )
        with pytest.raises(ValueError, match="length 2"):
            gmm_log_density(model, [0.0, 0.0, 0.0])


class TestQuantumDensity:
    def test_pure_rho_on_itself(self):
        rho = density_from_mixture([StateVector.zero(1)], [1.0])
        assert quantum_density(rho, StateVector.zero(1)) == 1.0

    def test_orthogonal_query(self):
        rho = density_from_mixture([StateVector.zero(1)], [1.0])
        assert quantum_density(rho, StateVector.basis(1, 1)) == 0.0

    def test_mixed_on_plus(self):
        rho = density_from_mixture(
            [StateVector.basis(1, 0), StateVector.basis(1, 1)], [0.75, 0.25]
        )
        plus = StateVector(np.array([1, 1]) / np.sqrt(2))
        assert quantum_density(rho, plus) == pytest.approx(0.5, abs=1e-12)


class TestMixtureWeights:
    def test_equal_raw_densities_give_priors(self):
        est = mixture_weights([0.5, 0.5, 0.5], [0.5, 0.3, 0.2])
        np.testing.assert_allclose(est.weights, [0.5, 0.3, 0.2], atol=1e-12)
        assert not est.used_fallback

    def test_zero_density_client_excluded(self):
        est = mixture_weights([1.0, 0.0], [0.75, 0.25])
        np.testing.assert_allclose(est.weights, [1.0, 0.0])

    def test_two_client_construction(self):
        # densities (1/2, 1/2) with p = (3/4, 1/4)
        est = mixture_weights([0.5, 0.5], [0.75, 0.25])
        np.testing.assert_allclose(est.weights, [0.75, 0.25], atol=1e-12)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            n = int(rng.integers(1, 6))
            raw = rng.random(n)
            p = rng.dirichlet(np.ones(n))
            est = mixture_weights(raw, p)
            assert float(np.sum(est.weights)) == pytest.approx(1.0, abs=1e-9)

    def test_gauge_invariance(self):
        rng = np.random.default_rng(7)
        raw = rng.random(4)
        p = rng.dirichlet(np.ones(4))
        a = mixture_weights(raw, p)
        b = mixture_weights(raw * 1e6, p)
        np.testing.assert_allclose(a.weights, b.weights, atol=1e-12)

    def test_all_zero_falls_back_to_priors(self):
        est = mixture_weights([0.0, 0.0], [0.6, 0.4])
        assert est.used_fallback
        np.testing.assert_allclose(est.weights, [0.6, 0.4])

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            mixture_weights([-0.1, 0.5], [0.5, 0.5])

    def test_log_domain_matches_linear(self):
        rng = np.random.default_rng(8)
        raw = rng.random(5) + 0.01
        p = rng.dirichlet(np.ones(5))
        lin = mixture_weights(raw, p)
        logd = mixture_weights_from_log(np.log(raw), p)
        np.testing.assert_allclose(logd.weights, lin.weights, atol=1e-12)

    def test_log_domain_handles_huge_magnitudes(self):
        # raw densities of order e^1000 would overflow float64
        logs = np.array([1000.0, 998.0, -5000.0])
        p = np.array([0.2, 0.5, 0.3])
        est = mixture_weights_from_log(logs, p)
        expected = np.array([0.2 * 1.0, 0.5 * np.exp(-2.0), 0.0])
        np.testing.assert_allclose(est.weights, expected / expected.sum(), atol=1e-12)
        assert not est.used_fallback

    def test_log_domain_all_neg_inf_falls_back(self):
        est = mixture_weights_from_log([-np.inf, -np.inf], [0.7, 0.3])
        assert est.used_fallback
        np.testing.assert_allclose(est.weights, [0.7, 0.3])


class TestDensityFile:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        X, _ = blobs(rng, 3, 40, 5)
        model = gmm_fit(X, n_modes=3, seed=3)
        path = tmp_path / "density.json"
        save_density_model(model, path)
        loaded = load_density_model(path)
        assert loaded.n_modes == model.n_modes
        np.testing.assert_array_equal(loaded.mix_weights, model.mix_weights)
        np.testing.assert_array_equal(loaded.means, model.means)
        np.testing.assert_array_equal(loaded.variances, model.variances)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.json"
        path.write_text('{"kind": "other"}')
        with pytest.raises(ValueError, match="not a density model"):
            load_density_model(path)
