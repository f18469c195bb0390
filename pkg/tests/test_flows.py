import json
import math

import numpy as np
import pytest

from dpflow.errors import (ConfigurationError, NonFiniteInputError,
                           NumericalOverflowError)
from dpflow.flows import (ActNormLayer, FlowModel, MadeLayer, ReversalLayer,
                          SphericalGaussian, build_maf, made_masks, nll_loss)


def random_model(rng, dim=None, hidden=None, blocks=None, actnorm=None,
                 scale=0.4):
    dim = dim or int(rng.integers(1, 6))
    hidden = hidden or int(rng.integers(4, 17))
    blocks = blocks or int(rng.integers(1, 4))
    actnorm = bool(rng.integers(2)) if actnorm is None else actnorm
    model = build_maf(dim, n_blocks=blocks, hidden=hidden, actnorm=actnorm,
                      seed=int(rng.integers(1 << 31)))
    model.set_flat(rng.normal(0.0, scale, model.n_params))
    for layer in model.layers:
        if isinstance(layer, ActNormLayer):
            layer.w = np.abs(layer.w) + 0.5
    return model


def numerical_jacobian(fn, x, h=1e-6):
    d = x.shape[0]
    jac = np.empty((d, d))
    for j in range(d):
        hi, lo = x.copy(), x.copy()
        hi[j] += h
        lo[j] -= h
        jac[:, j] = (fn(hi) - fn(lo)) / (2 * h)
    return jac


class TestMasks:
    def test_entries_binary(self):
        for dim, hidden in [(1, 4), (2, 7), (5, 16)]:
            for mask in made_masks(dim, hidden):
                assert set(np.unique(mask)) <= {0.0, 1.0}

    def test_autoregressivity_by_perturbation(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            dim = int(rng.integers(1, 6))
            layer = MadeLayer(dim, 12, rng=rng)
            layer.set_param_tensors([rng.normal(0, 0.5, t.shape)
                                     for t in layer.param_tensors()])
            x = rng.normal(size=(1, dim))
            u, _ = layer.forward(x)
            for i in range(dim):
                for j in range(i, dim):
                    bumped = x.copy()
                    bumped[0, j] += rng.normal() + 0.5
                    u2, _ = layer.forward(bumped)
                    assert u2[0, i] == u[0, i] or (j == i)
                    if j > i:
                        assert u2[0, i] == u[0, i]


class TestMadeLayer:
    def test_identity_at_zero_parameters(self):
        layer = MadeLayer(3, 8, rng=0)
        layer.set_param_tensors([np.zeros_like(t)
                                 for t in layer.param_tensors()])
        u, logdet = layer.forward(np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_array_equal(u, [[1.0, 2.0, 3.0]])
        assert logdet[0] == 0.0

    def test_constant_log_scale(self):
        # Constant alpha = ln 2 per coordinate through the tanh squash.
        layer = MadeLayer(3, 8, s_max=5.0, rng=0)
        tensors = [np.zeros_like(t) for t in layer.param_tensors()]
        tensors[-1] = np.full(3, 5.0 * math.atanh(math.log(2.0) / 5.0))
        layer.set_param_tensors(tensors)
        u, logdet = layer.forward(np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(u, [[0.5, 1.0, 1.5]], rtol=1e-14)
        assert logdet[0] == pytest.approx(-3 * math.log(2.0), rel=1e-14)

    def test_logdet_matches_numerical_jacobian(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            layer = MadeLayer(2, 10, rng=rng)
            layer.set_param_tensors([rng.normal(0, 0.5, t.shape)
                                     for t in layer.param_tensors()])
            x = rng.normal(size=2)
            _, logdet = layer.forward(x[None, :])
            jac = numerical_jacobian(
                lambda v: layer.forward(v[None, :])[0][0], x)
            assert logdet[0] == pytest.approx(
                math.log(abs(np.linalg.det(jac))), abs=1e-5)

    def test_inverse_zero_weight(self):
        layer = MadeLayer(2, 6, rng=0)
        layer.set_param_tensors([np.zeros_like(t)
                                 for t in layer.param_tensors()])
        x, _ = layer.inverse(np.array([[0.1, -0.2]]))
        np.testing.assert_array_equal(x, [[0.1, -0.2]])

    def test_inverse_constant_scale(self):
        layer = MadeLayer(3, 8, rng=0)
        tensors = [np.zeros_like(t) for t in layer.param_tensors()]
        tensors[-1] = np.full(3, 5.0 * math.atanh(math.log(2.0) / 5.0))
        layer.set_param_tensors(tensors)
        x, _ = layer.inverse(np.array([[0.5, 1.0, 1.5]]))
        np.testing.assert_allclose(x, [[1.0, 2.0, 3.0]], rtol=1e-14)

    def test_round_trip(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            dim = int(rng.integers(1, 6))
            layer = MadeLayer(dim, 12, rng=rng)
            layer.set_param_tensors([rng.normal(0, 0.5, t.shape)
                                     for t in layer.param_tensors()])
            x = rng.normal(size=(30, dim))
            u, _ = layer.forward(x)
            back, _ = layer.inverse(u)
            fwd_again, _ = layer.forward(back)
            assert np.abs(back - x).max() < 1e-10
            assert np.abs(fwd_again - u).max() < 1e-10


class TestActNorm:
    def test_identity_defaults(self):
        layer = ActNormLayer(2)
        y, logdet = layer.forward(np.array([[3.0, -1.0]]))
        np.testing.assert_array_equal(y, [[3.0, -1.0]])
        assert logdet[0] == 0.0

    def test_affine_case(self):
        layer = ActNormLayer(2, w=[2.0, 4.0], b=[1.0, 1.0])
        y, logdet = layer.forward(np.array([[3.0, 5.0]]))
        np.testing.assert_allclose(y, [[1.0, 1.0]])
        assert logdet[0] == pytest.approx(-math.log(8.0))

    def test_round_trip_and_logdet_negation(self):
        rng = np.random.default_rng(5)
        layer = ActNormLayer(3, w=rng.uniform(0.5, 2.0, 3),
                             b=rng.normal(size=3))
        x = rng.normal(size=(10, 3))
        y, ld_fwd = layer.forward(x)
        back, ld_inv = layer.inverse(y)
        np.testing.assert_allclose(back, x, atol=1e-12)
        np.testing.assert_allclose(ld_fwd, -ld_inv)

    def test_scale_floor_rejected(self):
        with pytest.raises(ConfigurationError):
            ActNormLayer(2, w=[1.0, 1e-9])


class TestLogProb:
    def test_identity_flow_origin(self):
        model = build_maf(2, n_blocks=2, hidden=8, seed=0)
        model.set_flat(np.zeros(model.n_params))
        assert model.log_prob(np.zeros(2)) \
            == pytest.approx(-math.log(2 * math.pi), rel=1e-12)

    def test_identity_flow_unit_point(self):
        model = build_maf(2, n_blocks=2, hidden=8, seed=0)
        model.set_flat(np.zeros(model.n_params))
        assert model.log_prob(np.ones(2)) \
            == pytest.approx(-math.log(2 * math.pi) - 1.0, rel=1e-12)

    def test_single_actnorm_closed_form(self):
        model = FlowModel([ActNormLayer(1, w=[2.0])], SphericalGaussian(1))
        assert model.log_prob(np.zeros(1)) \
            == pytest.approx(-0.5 * math.log(2 * math.pi) - math.log(2.0))

    def test_non_finite_input_rejected(self):
        model = build_maf(2, n_blocks=1, hidden=4, seed=0)
        with pytest.raises(NonFiniteInputError):
            model.log_prob(np.array([np.nan, 0.0]))

    def test_overflow_names_layer(self):
        model = build_maf(2, n_blocks=2, hidden=4, seed=0)
        # Force an in-layer overflow: a huge shift head turns mu into inf,
        # so u = (x - mu) exp(-alpha) is non-finite inside layer 0.
        model.layers[0].b2[:] = 1.0
        model.layers[0].Wm[:] = 1e308
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NumericalOverflowError) as err:
                model.log_prob(np.array([1.0, 1.0]))
        assert err.value.layer_index == 0

    def test_normalization_1d(self):
        rng = np.random.default_rng(6)
        for _ in range(3):
            model = random_model(rng, dim=1, hidden=8, blocks=2, scale=0.25)
            xs = np.arange(-20.0, 20.0 + 1e-3, 1e-3)[:, None]
            density = np.exp(model.log_prob(xs))
            integral = np.trapezoid(density, dx=1e-3)
            assert integral == pytest.approx(1.0, abs=1e-3)


class TestSampling:
    def test_identity_flow_mean(self):
        model = build_maf(2, n_blocks=1, hidden=4, seed=0)
        model.set_flat(np.zeros(model.n_params))
        pts = model.sample(100_000, seed=8)
        assert np.abs(pts.mean(axis=0)).max() < 4 / math.sqrt(100_000)

    def test_seed_determinism(self):
        model = build_maf(3, n_blocks=2, hidden=8, seed=1)
        np.testing.assert_array_equal(model.sample(50, seed=3),
                                      model.sample(50, seed=3))

    def test_actnorm_pushforward(self):
        model = FlowModel([ActNormLayer(1, w=[2.0], b=[3.0])],
                          SphericalGaussian(1))
        pts = model.sample(100_000, seed=9)[:, 0]
        assert pts.mean() == pytest.approx(3.0, abs=4 * 2 / math.sqrt(100_000))
        assert pts.std() == pytest.approx(2.0, rel=0.02)

    def test_full_stack_round_trip(self):
        rng = np.random.default_rng(10)
        for _ in range(5):
            model = random_model(rng)
            x = rng.normal(size=(40, model.dim))
            z = x
            for layer in model.layers:
                z, _ = layer.forward(z)
            back = z
            for layer in reversed(model.layers):
                back, _ = layer.inverse(back)
            assert np.abs(back - x).max() < 1e-8


class TestNll:
    def test_identity_flow_single_point(self):
        model = build_maf(2, n_blocks=1, hidden=4, seed=0)
        model.set_flat(np.zeros(model.n_params))
        assert nll_loss(model, np.zeros((1, 2))) \
            == pytest.approx(math.log(2 * math.pi))

    def test_duplicate_row_invariance(self):
        rng = np.random.default_rng(11)
        model = random_model(rng, dim=2)
        row = rng.normal(size=(1, 2))
        assert nll_loss(model, row) \
            == pytest.approx(nll_loss(model, np.vstack([row, row])))

    def test_matches_mean_log_prob(self):
        rng = np.random.default_rng(12)
        model = random_model(rng, dim=3)
        batch = rng.normal(size=(17, 3))
        assert nll_loss(model, batch) \
            == pytest.approx(-np.mean(model.log_prob(batch)), rel=1e-15)

    def test_empty_batch(self):
        model = build_maf(2, n_blocks=1, hidden=4, seed=0)
        with pytest.raises(NonFiniteInputError):
            model.nll(np.zeros((0, 2)))


class TestPerExampleGrad:
    def test_actnorm_offset_symbolic(self):
        model = FlowModel([ActNormLayer(1)], SphericalGaussian(1))
        grad = model.per_example_grad(np.array([1.0]))
        # layout: [w, b]; d(-log p)/db = -(x - b)/w^2 = -1
        assert grad[1] == pytest.approx(-1.0, rel=1e-12)
        assert grad[0] == pytest.approx(0.0, abs=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        for _ in range(5):
            model = random_model(rng)
            flat = model.get_flat()
            x = rng.normal(size=model.dim)
            grad = model.per_example_grad(x)
            h = 1e-5
            for j in rng.choice(model.n_params,
                                size=min(60, model.n_params), replace=False):
                bumped = flat.copy()
                bumped[j] += h
                model.set_flat(bumped)
                hi = -model.log_prob(x)
                bumped[j] -= 2 * h
                model.set_flat(bumped)
                lo = -model.log_prob(x)
                model.set_flat(flat)
                fd = (hi - lo) / (2 * h)
                denom = max(1.0, abs(grad[j]), abs(fd))
                assert abs(grad[j] - fd) / denom < 1e-5

    def test_stationary_shift_biases(self):
        model = build_maf(2, n_blocks=2, hidden=6, seed=0)
        model.set_flat(np.zeros(model.n_params))
        grad = model.per_example_grad(np.zeros(2))
        for layer, entries in zip(model.layers, model._slices):
            if isinstance(layer, MadeLayer):
                start, end, _ = entries[6]  # bm slice
                np.testing.assert_allclose(grad[start:end], 0.0, atol=1e-15)

    def test_batch_shape(self):
        rng = np.random.default_rng(14)
        model = random_model(rng, dim=2)
        grads = model.per_example_grad(rng.normal(size=(7, 2)))
        assert grads.shape == (7, model.n_params)


class TestSerialization:
    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(15)
        model = random_model(rng)
        points = rng.normal(size=(100, model.dim))
        reloaded = FlowModel.from_json(model.to_json())
        np.testing.assert_array_equal(model.log_prob(points),
                                      reloaded.log_prob(points))
        np.testing.assert_array_equal(model.get_flat(), reloaded.get_flat())

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(16)
        model = random_model(rng, dim=2, actnorm=True)
        path = tmp_path / "model.json"
        model.save(path)
        reloaded = FlowModel.load(path)
        pts = rng.normal(size=(20, 2))
        np.testing.assert_array_equal(model.log_prob(pts),
                                      reloaded.log_prob(pts))

    def test_format_version_present(self):
        model = build_maf(2, n_blocks=1, hidden=4, seed=0)
        doc = json.loads(model.to_json())
        assert doc["format_version"] == 1
        assert doc["dim"] == 2

    def test_gmm_base_round_trip(self):
        from dpflow.flows import GmmBase
        from dpflow.gmm import GmmParams
        rng = np.random.default_rng(17)
        gmm = GmmParams(np.array([0.3, 0.7]), rng.normal(size=(2, 2)),
                        rng.uniform(0.5, 2.0, (2, 2)))
        model = build_maf(2, n_blocks=2, hidden=6, base=GmmBase(gmm), seed=2)
        model.set_flat(rng.normal(0, 0.3, model.n_params))
        reloaded = FlowModel.from_json(model.to_json())
        pts = rng.normal(size=(30, 2))
        np.testing.assert_array_equal(model.log_prob(pts),
                                      reloaded.log_prob(pts))


class TestLayout:
    def test_flat_round_trip(self):
        rng = np.random.default_rng(18)
        model = random_model(rng)
        flat = rng.normal(size=model.n_params)
        model.set_flat(flat)
        np.testing.assert_array_equal(model.get_flat(), flat)

    def test_layout_covers_all_parameters(self):
        model = build_maf(3, n_blocks=2, hidden=8, actnorm=True, seed=0)
        total = sum(t.size for layer in model.layers
                    for t in layer.param_tensors())
        assert model.n_params == total
