import math

import numpy as np
import pytest

from dpflow.errors import ConfigurationError
from dpflow.flows import ActNormLayer, build_maf
from dpflow.gmm import (VARIANCE_FLOOR, GmmParams, gmm_fit_em, gmm_logpdf,
                        gmm_logpdf_grad, gmm_sample)
from dpflow.initialization import InitConfig, dp_nf_init, laplace_init_scale


def random_gmm(rng, m=3, d=2):
    w = rng.uniform(0.2, 1.0, m)
    return GmmParams(w / w.sum(), rng.normal(size=(m, d)),
                     rng.uniform(0.3, 2.0, (m, d)))


class TestGmmLogpdf:
    def test_single_standard_component(self):
        gmm = GmmParams(np.array([1.0]), np.zeros((1, 2)), np.ones((1, 2)))
        assert gmm_logpdf(gmm, np.zeros(2)) \
            == pytest.approx(-math.log(2 * math.pi), rel=1e-14)

    def test_duplicate_components_collapse(self):
        mean, var = np.array([[0.5, -1.0]]), np.array([[1.2, 0.7]])
        one = GmmParams(np.array([1.0]), mean, var)
        two = GmmParams(np.array([0.5, 0.5]), np.vstack([mean, mean]),
                        np.vstack([var, var]))
        x = np.array([0.3, 0.4])
        assert gmm_logpdf(two, x) == pytest.approx(gmm_logpdf(one, x),
                                                   rel=1e-14)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(1)
        gmm = random_gmm(rng)
        for _ in range(20):
            x = rng.normal(size=2)
            direct = 0.0
            for w, mu, var in zip(gmm.weights, gmm.means, gmm.variances):
                norm = np.prod(1 / np.sqrt(2 * math.pi * var))
                direct += w * norm * math.exp(-0.5 * np.sum((x - mu) ** 2 / var))
            assert gmm_logpdf(gmm, x) == pytest.approx(math.log(direct),
                                                       abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        gmm = random_gmm(rng)
        x = rng.normal(size=(4, 2))
        grad = gmm_logpdf_grad(gmm, x)
        h = 1e-6
        for i in range(4):
            for j in range(2):
                hi, lo = x[i].copy(), x[i].copy()
                hi[j] += h
                lo[j] -= h
                fd = (gmm_logpdf(gmm, hi) - gmm_logpdf(gmm, lo)) / (2 * h)
                assert grad[i, j] == pytest.approx(fd, abs=1e-7)

    def test_1d_normalization(self):
        rng = np.random.default_rng(3)
        gmm = random_gmm(rng, m=3, d=1)
        xs = np.arange(-20.0, 20.0, 1e-3)[:, None]
        integral = np.trapezoid(np.exp(gmm_logpdf(gmm, xs)), dx=1e-3)
        assert integral == pytest.approx(1.0, abs=1e-3)


class TestGmmSample:
    def test_component_frequencies(self):
        rng = np.random.default_rng(4)
        weights = np.array([0.2, 0.5, 0.3])
        gmm = GmmParams(weights, np.array([[-50.0], [0.0], [50.0]]),
                        np.ones((3, 1)))
        pts = gmm_sample(gmm, 100_000, seed=5)[:, 0]
        counts = np.array([(pts < -25).sum(),
                           ((pts >= -25) & (pts < 25)).sum(),
                           (pts >= 25).sum()])
        for c, w in zip(counts, weights):
            sd = math.sqrt(100_000 * w * (1 - w))
            assert abs(c - 100_000 * w) < 3 * sd

    def test_single_component_mean(self):
        gmm = GmmParams(np.array([1.0]), np.array([[2.0, -1.0]]),
                        np.array([[4.0, 0.25]]))
        pts = gmm_sample(gmm, 100_000, seed=6)
        assert abs(pts[:, 0].mean() - 2.0) < 4 * 2.0 / math.sqrt(100_000)
        assert abs(pts[:, 1].mean() + 1.0) < 4 * 0.5 / math.sqrt(100_000)

    def test_seed_determinism(self):
        rng = np.random.default_rng(7)
        gmm = random_gmm(rng)
        np.testing.assert_array_equal(gmm_sample(gmm, 64, seed=8),
                                      gmm_sample(gmm, 64, seed=8))


class TestGmmFitEm:
    def test_single_component_closed_form(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(500, 3)) * [1.0, 2.0, 0.5] + [1.0, -1.0, 0.0]
        gmm, _ = gmm_fit_em(X, 1, n_iters=3, seed=0)
        np.testing.assert_allclose(gmm.means[0], X.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(gmm.variances[0], X.var(axis=0),
                                   rtol=1e-12)

    def test_separated_clusters_recovered(self):
        rng = np.random.default_rng(10)
        X = np.vstack([rng.normal(size=(1000, 2)) + 5.0,
                       rng.normal(size=(1000, 2)) - 5.0])
        gmm, _ = gmm_fit_em(X, 2, n_iters=50, seed=1)
        means = gmm.means[np.argsort(gmm.means[:, 0])]
        np.testing.assert_allclose(means[0], [-5.0, -5.0], atol=0.2)
        np.testing.assert_allclose(means[1], [5.0, 5.0], atol=0.2)
        np.testing.assert_allclose(gmm.weights, [0.5, 0.5], atol=0.05)

    def test_loglik_monotone(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(400, 2)) @ np.array([[1.0, 0.4], [0.0, 0.8]])
        _, trace = gmm_fit_em(X, 4, n_iters=40, seed=2)
        diffs = np.diff(trace)
        assert np.all(diffs >= -1e-9)

    def test_needs_more_points_than_components(self):
        with pytest.raises(ConfigurationError):
            gmm_fit_em(np.zeros((3, 2)), 5)

    def test_variances_floored(self):
        X = np.vstack([np.zeros((50, 2)), np.ones((50, 2))])
        gmm, _ = gmm_fit_em(X, 2, n_iters=30, seed=3)
        assert np.all(gmm.variances >= VARIANCE_FLOOR * (1 - 1e-12))


class TestGmmBaseFlow:
    def test_density_normalized_and_invertible(self):
        from dpflow.flows import GmmBase, build_maf
        rng = np.random.default_rng(15)
        gmm = random_gmm(rng, m=3, d=1)
        model = build_maf(1, n_blocks=2, hidden=8, base=GmmBase(gmm), seed=4)
        model.set_flat(rng.normal(0.0, 0.25, model.n_params))
        xs = np.arange(-20.0, 20.0, 1e-3)[:, None]
        integral = np.trapezoid(np.exp(model.log_prob(xs)), dx=1e-3)
        assert integral == pytest.approx(1.0, abs=1e-3)
        pts = model.sample(200, seed=5)
        back = model.transform_to_base(pts)
        rebuilt = back
        for layer in reversed(model.layers):
            rebuilt, _ = layer.inverse(rebuilt)
        np.testing.assert_allclose(rebuilt, pts, atol=1e-10)


class TestDpNfInit:
    def test_laplace_scale_formula(self):
        # K=1, delta=e^-1, sensitivity 1, eps=2 -> 2 sqrt(4)/2 = 2.
        assert laplace_init_scale(1, math.exp(-1), 1.0, 2.0) \
            == pytest.approx(2.0, rel=1e-14)

    def test_infinite_budget_gives_exact_clipped_stats(self):
        rng = np.random.default_rng(12)
        X = rng.normal(size=(500, 2)) * 3.0
        model = build_maf(2, n_blocks=1, hidden=8, actnorm=True, seed=0)
        cfg = InitConfig(clip_range=2.0, epsilon=math.inf, delta=0.5, seed=0)
        dp_nf_init(X, model, cfg)
        actnorm = [l for l in model.layers if isinstance(l, ActNormLayer)][0]
        # layers before the actnorm are identity + reversal at build time
        clipped = np.clip(X[:, ::-1], -1.0, 1.0)
        np.testing.assert_allclose(actnorm.b, clipped.mean(axis=0),
                                   rtol=1e-12)
        np.testing.assert_allclose(actnorm.w, clipped.std(axis=0), rtol=1e-12)

    def test_standardizes_features_without_noise(self):
        rng = np.random.default_rng(13)
        X = rng.normal(size=(2000, 3))
        X = (X - X.mean(axis=0)) / X.std(axis=0)
        model = build_maf(3, n_blocks=3, hidden=8, actnorm=True, seed=1)
        cfg = InitConfig(clip_range=50.0, epsilon=math.inf, delta=0.5, seed=0)
        dp_nf_init(X, model, cfg)
        out = model.transform_to_base(X)
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-10)

    def test_deterministic_and_floored(self):
        rng = np.random.default_rng(14)
        X = rng.normal(size=(50, 2))
        results = []
        for _ in range(2):
            model = build_maf(2, n_blocks=2, hidden=8, actnorm=True, seed=2)
            cfg = InitConfig(clip_range=4.0, epsilon=0.5, delta=1e-3, seed=9)
            dp_nf_init(X, model, cfg)
            ws = np.concatenate([l.w for l in model.layers
                                 if isinstance(l, ActNormLayer)])
            assert np.all(ws >= 1e-6)
            results.append(model.get_flat())
        np.testing.assert_array_equal(results[0], results[1])

    def test_requires_actnorm_layers(self):
        model = build_maf(2, n_blocks=1, hidden=4, actnorm=False, seed=0)
        with pytest.raises(ConfigurationError):
            dp_nf_init(np.zeros((10, 2)), model, InitConfig())

    def test_empty_dataset_rejected(self):
        model = build_maf(2, n_blocks=1, hidden=4, actnorm=True, seed=0)
        with pytest.raises(ConfigurationError):
            dp_nf_init(np.zeros((0, 2)), model, InitConfig())
