import math

import numpy as np
import pytest

from gmvae_osr import tensor as T
from gmvae_osr.dists import DiagGaussian, flat_sigma_for_delta, gaussian_log_pdf
from gmvae_osr.errors import ContractError, DimensionError, DomainError, FormatError
from gmvae_osr.model import (ModelConfig, add_subcluster_head, decode, embed, encode_w, encode_z,
                             generate_sample, generate_samples, init_params, load_checkpoint, one_hot,
                             save_checkpoint, subcluster_components, subcluster_heads,
                             trivial_solution, v_posterior)
from gmvae_osr.networks import HeadedNetwork, Layer, build_network, set_constant_output
from gmvae_osr.serialize import load_bundle, save_bundle
from gmvae_osr.tensor import Tape, Tensor



def layer(i, o, act="identity", rng=None):
    rng = rng or np.random.default_rng(0)
    return Layer(Tensor(rng.normal(size=(i, o))), Tensor(rng.normal(size=o)), act)


class TestHeadedNetwork:
    def test_rejects_non_identity_final_activation(self):
        with pytest.raises(ContractError):
            HeadedNetwork([layer(3, 4, "relu")], [[layer(4, 2, "relu")]], 3)

    def test_rejects_broken_shape_chain(self):
        with pytest.raises(DimensionError):
            HeadedNetwork([layer(3, 4, "relu")], [[layer(5, 2)]], 3)

    def test_head_count_and_dims(self, rng):
        net = build_network(5, [8, 8], [2, 3, 1], rng)
        assert net.head_dims == [2, 3, 1]
        outs = net(rng.normal(size=(4, 5)))
        assert [o.shape for o in outs] == [(4, 2), (4, 3), (4, 1)]

    def test_constant_output_for_all_inputs(self, rng):
        net = build_network(5, [8, 8], [2, 3], rng, head_hidden=(4,))
        targets = [np.array([0.5, -1.0]), np.array([3.0, 0.0, 2.0])]
        set_constant_output(net, targets)
        a, b = net(rng.normal(size=(1, 5))), net(10 * rng.normal(size=(1, 5)))
        for oa, ob, t in zip(a, b, targets):
            assert np.array_equal(oa.data[0], t) and np.array_equal(ob.data[0], t)

    def test_zero_targets(self, rng):
        net = build_network(3, [4], [2], rng)
        set_constant_output(net, [np.zeros(2)])
        assert not np.any(net(rng.normal(size=(3, 3)))[0].data)

    def test_constant_output_has_zero_input_gradient(self, rng):
        net = build_network(3, [4, 4], [2, 2], rng)
        set_constant_output(net, [np.ones(2), -np.ones(2)])
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        with Tape() as tape:
            out = net(x)
            root = T.tsum(T.square(out[0])) + T.tsum(out[1])
        tape.backward(root)
        assert x.grad is not None and not np.any(x.grad)

    def test_constant_output_dimension_mismatch(self, rng):
        net = build_network(3, [4], [2], rng)
        with pytest.raises(ContractError):
            set_constant_output(net, [np.zeros(3)])
        with pytest.raises(ContractError):
            set_constant_output(net, [np.zeros(2), np.zeros(2)])


class TestEncoders:
    def test_encode_z_shapes_and_purity(self, tiny_params, rng):
        x = rng.random((5, 6))
        a, b = encode_z(tiny_params, x), encode_z(tiny_params, x)
        assert a.mean.shape == (5, 2) and a.logvar.shape == (5, 2)
        assert np.array_equal(a.mean.data, b.mean.data)
        assert np.array_equal(a.logvar.data, b.logvar.data)

    def test_encode_z_constant(self, tiny_params, rng):
        set_constant_output(tiny_params.phi_z, [np.array([1.0, 2.0]), np.array([-1.0, 0.5])])
        q = encode_z(tiny_params, rng.random((3, 6)))
        assert np.array_equal(q.mean.data, np.tile([1.0, 2.0], (3, 1)))
        assert np.array_equal(q.logvar.data, np.tile([-1.0, 0.5], (3, 1)))

    def test_encode_z_dimension(self, tiny_params):
        with pytest.raises(DimensionError):
            encode_z(tiny_params, np.zeros((2, 5)))

    def test_encode_w_standard_normal_under_constant_output(self, tiny_params, rng):
        set_constant_output(tiny_params.phi_w, [np.zeros(2), np.zeros(2)])
        x = rng.random((4, 6))
        q1 = encode_w(tiny_params, x, one_hot([1, 1, 2, 2], 2))
        q2 = encode_w(tiny_params, x, one_hot([2, 2, 1, 1], 2))
        assert not np.any(q1.mean.data) and np.array_equal(np.exp(q1.logvar.data), np.ones((4, 2)))
        assert np.array_equal(q1.mean.data, q2.mean.data)

    def test_encode_w_shape_and_label_effect(self, tiny_params, rng):
        x = rng.random((2, 6))
        q1 = encode_w(tiny_params, x, one_hot([1, 1], 2))
        q2 = encode_w(tiny_params, x, one_hot([2, 2], 2))
        assert q1.mean.shape == (2, 2)
        assert not np.array_equal(q1.mean.data, q2.mean.data)

    @pytest.mark.parametrize("y", [[[1.0, 1.0]], [[0.5, 0.5]], [[0.0, 0.0]], [[1.0, 0.0, 0.0]]])
    def test_encode_w_rejects_invalid_one_hot(self, tiny_params, y):
        with pytest.raises(ContractError):
            encode_w(tiny_params, np.zeros((1, 6)), np.array(y))

    def test_one_hot_is_one_based(self):
        assert one_hot([1, 3], 3).tolist() == [[1, 0, 0], [0, 0, 1]]
        with pytest.raises(ContractError):
            one_hot([0], 3)


class TestSubclusters:
    def test_single_component(self, tiny_params, rng):
        assert len(subcluster_components(tiny_params, rng.normal(size=(1, 2)), 2)) == 1

    def test_class_out_of_range(self, tiny_params):
        with pytest.raises(ContractError):
            subcluster_components(tiny_params, np.zeros((1, 2)), 3)
        with pytest.raises(ContractError):
            subcluster_components(tiny_params, np.zeros((1, 2)), 0)

    def test_head_indexing_round_trip(self, rng):
        cfg = ModelConfig(2, (2, 3), 4, dim_z=2, dim_w=2, hidden=(4,), beta_hidden=(4,))
        params = init_params(cfg, 0)
        # give head h the constant output (h, h)
        set_constant_output(params.beta, [np.full(2, float(h)) for h in range(10)])
        offsets = {1: 0, 2: 2}
        for c in (1, 2):
            comps = subcluster_components(params, rng.normal(size=(1, 2)), c)
            for k, g in enumerate(comps, start=1):
                head = 2 * (offsets[c] + k - 1)
                assert g.mean.data[0, 0] == head and g.logvar.data[0, 0] == head + 1
        assert subcluster_heads(cfg, 2) == [4, 5, 6, 7, 8, 9]

    def test_identical_components(self, rng):
        cfg = ModelConfig(1, (3,), 4, dim_z=2, dim_w=2, hidden=(4,))
        params = init_params(cfg, 0)
        set_constant_output(params.beta, [np.array([0.3, 0.1]), np.array([0.0, -1.0])] * 3)
        comps = subcluster_components(params, rng.normal(size=(2, 2)), 1)
        for g in comps[1:]:
            assert np.array_equal(g.mean.data, comps[0].mean.data)
        post = v_posterior(params, rng.normal(size=(2, 2)), rng.normal(size=(2, 2)), 1).data
        np.testing.assert_allclose(post, np.full((2, 3), 1 / 3), atol=1e-15)

    def test_posterior_single_component(self, tiny_params, rng):
        post = v_posterior(tiny_params, rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), 2)
        np.testing.assert_array_equal(post.data, np.ones((3, 1)))

    def test_two_component_posterior_is_logistic(self, tiny_params, rng):
        z, w = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        comps = subcluster_components(tiny_params, w, 1)
        gap = gaussian_log_pdf(z, comps[0]).data - gaussian_log_pdf(z, comps[1]).data
        post = v_posterior(tiny_params, z, w, 1).data
        np.testing.assert_allclose(post[:, 0], 1 / (1 + np.exp(-gap)), rtol=1e-12)
        np.testing.assert_allclose(post[:, 1], 1 / (1 + np.exp(gap)), rtol=1e-12)

    def test_posterior_stable_for_extreme_gaps(self):
        cfg = ModelConfig(1, (2,), 4, dim_z=1, dim_w=1, hidden=(4,))
        params = init_params(cfg, 0)
        set_constant_output(params.beta, [np.array([0.0]), np.array([-9.0]),
                                          np.array([1.5]), np.array([-9.0])])
        post = v_posterior(params, np.array([[0.0], [1.5]]), np.zeros((2, 1)), 1).data
        assert np.all(np.isfinite(post))
        np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-12)
        assert post[0, 0] == pytest.approx(1.0) and post[1, 1] == pytest.approx(1.0)

    def test_nonuniform_prior(self, rng):
        cfg = ModelConfig(1, (2,), 4, dim_z=1, dim_w=1, hidden=(4,), v_prior=((0.2, 0.8),))
        params = init_params(cfg, 0)
        set_constant_output(params.beta, [np.zeros(1)] * 4)
        post = v_posterior(params, rng.normal(size=(3, 1)), rng.normal(size=(3, 1)), 1).data
        np.testing.assert_allclose(post, np.tile([0.2, 0.8], (3, 1)), atol=1e-15)

    @pytest.mark.parametrize("prior", [((0.5, 0.6),), ((1.0,),), ((-0.5, 1.5),)])
    def test_invalid_prior(self, prior):
        with pytest.raises(ContractError):
            ModelConfig(1, (2,), 4, dim_z=1, dim_w=1, v_prior=prior)


class TestDecode:
    def test_constant_theta(self, tiny_params, rng):
        mu = np.array([0.1, 0.2, 0.5, 0.7, 0.9, 0.35])
        set_constant_output(tiny_params.theta, [np.log(mu) - np.log1p(-mu)])
        p = decode(tiny_params, rng.normal(size=(3, 2))).mean.data
        np.testing.assert_allclose(p, np.tile(mu, (3, 1)), rtol=1e-14)

    def test_range(self, tiny_params, rng):
        p = decode(tiny_params, 50 * rng.normal(size=(20, 2))).mean.data
        assert np.all((p > 0) & (p < 1))

    def test_zero_gradient_under_constant_theta(self, tiny_params, rng):
        set_constant_output(tiny_params.theta, [np.full(6, 0.3)])
        z = rng.normal(size=(1, 2))
        base = decode(tiny_params, z).mean.data
        for j in range(2):
            dz = np.zeros((1, 2))
            dz[0, j] = 1e-5
            assert np.array_equal(decode(tiny_params, z + dz).mean.data, base)

    def test_dimension(self, tiny_params):
        with pytest.raises(DimensionError):
            decode(tiny_params, np.zeros((1, 3)))


class TestAddSubclusterHead:
    def test_existing_components_unchanged(self, tiny_params, rng):
        new = add_subcluster_head(tiny_params, 1, (np.zeros(2), np.zeros(2)))
        for _ in range(100):
            w = rng.normal(size=(1, 2))
            for c in (1, 2):
                old = subcluster_components(tiny_params, w, c)
                ext = subcluster_components(new, w, c)
                for a, b in zip(old, ext):
                    assert np.array_equal(a.mean.data, b.mean.data)
                    assert np.array_equal(a.logvar.data, b.logvar.data)

    def test_flat_component_bounded(self, tiny_params, rng):
        delta = 1e-3
        u = flat_sigma_for_delta(delta, 2)
        new = add_subcluster_head(tiny_params, 2, (np.zeros(2), np.full(2, 2 * math.log(u))))
        flat = subcluster_components(new, rng.normal(size=(1, 2)), 2)[-1]
        zs = np.stack(np.meshgrid(*[np.linspace(-10 * u, 10 * u, 81)] * 2), -1).reshape(-1, 2)
        g = DiagGaussian(np.tile(flat.mean.data, (len(zs), 1)), np.tile(flat.logvar.data, (len(zs), 1)))
        assert np.exp(gaussian_log_pdf(zs, g).data).max() <= delta * (1 + 1e-12)

    def test_bookkeeping(self, tiny_params):
        new = add_subcluster_head(tiny_params, 2, (np.zeros(2), np.zeros(2)))
        assert new.config.K == (2, 2) and tiny_params.config.K == (2, 1)
        assert len(new.beta.heads) == 8 and len(tiny_params.beta.heads) == 6
        assert new.phi_z is not tiny_params.phi_z

    def test_init_dimension(self, tiny_params):
        with pytest.raises(ContractError):
            add_subcluster_head(tiny_params, 1, (np.zeros(3), np.zeros(3)))

    def test_explicit_prior_needs_extension(self):
        cfg = ModelConfig(1, (2,), 4, dim_z=1, dim_w=1, v_prior=((0.3, 0.7),))
        params = init_params(cfg, 0)
        with pytest.raises(ContractError):
            add_subcluster_head(params, 1, (np.zeros(1), np.zeros(1)))
        new = add_subcluster_head(params, 1, (np.zeros(1), np.zeros(1)), prior=(0.2, 0.5, 0.3))
        assert new.config.v_prior == ((0.2, 0.5, 0.3),)


class TestTrivialSolutionAndSampling:
    def test_sample_equals_mu_x(self):
        cfg = ModelConfig(2, (2, 3), 5, dim_z=2, dim_w=2, hidden=(4,))
        mu = np.array([0.1, 0.3, 0.5, 0.7, 0.9])
        params = trivial_solution(cfg, mu)
        r = np.random.default_rng(0)
        for c in (1, 2):
            for _ in range(5):
                np.testing.assert_allclose(generate_sample(params, c, r), mu, rtol=1e-14)

    @pytest.mark.parametrize("mu", [[0.0, 0.5], [0.5, 1.0]])
    def test_boundary_mu(self, mu):
        with pytest.raises(DomainError):
            trivial_solution(ModelConfig(1, (1,), 2, dim_z=1, dim_w=1), np.array(mu))

    def test_seeded(self, tiny_params):
        a = generate_sample(tiny_params, 1, np.random.default_rng(5), binarize=True)
        b = generate_sample(tiny_params, 1, np.random.default_rng(5), binarize=True)
        assert np.array_equal(a, b) and set(np.unique(a)) <= {0.0, 1.0}

    def test_subcluster_frequencies(self):
        cfg = ModelConfig(1, (3,), 2, dim_z=1, dim_w=1, hidden=(2,), beta_hidden=(2,),
                          v_prior=((0.2, 0.3, 0.5),))
        params = init_params(cfg, 0)
        n = 100_000
        _, lat = generate_samples(params, 1, n, np.random.default_rng(11), return_latents=True)
        freq = np.bincount(lat["v"], minlength=4)[1:] / n
        p = np.array([0.2, 0.3, 0.5])
        assert np.all(np.abs(freq - p) < 4 * np.sqrt(p * (1 - p) / n))

    def test_batch_matches_component_draws(self, tiny_params):
        x, lat = generate_samples(tiny_params, 1, 50, np.random.default_rng(2), return_latents=True)
        assert x.shape == (50, 6) and set(np.unique(lat["v"])) <= {1, 2}
        np.testing.assert_allclose(x, decode(tiny_params, lat["z"]).mean.data)


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tiny_params, tmp_path, rng):
        save_checkpoint(tiny_params, tmp_path / "ck", extra={"note": 1})
        loaded = load_checkpoint(tmp_path / "ck")
        assert loaded.config == tiny_params.config
        for (n1, a), (n2, b) in zip(tiny_params.named_parameters(), loaded.named_parameters()):
            assert n1 == n2 and np.array_equal(a.data, b.data)
        x = rng.random((3, 6))
        assert np.array_equal(embed(tiny_params, x), embed(loaded, x))

    def test_bytes_deterministic(self, tiny_params, tmp_path):
        save_checkpoint(tiny_params, tmp_path / "a")
        save_checkpoint(tiny_params, tmp_path / "b")
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_wrong_kind(self, tmp_path):
        save_bundle(tmp_path / "d", {"a": np.zeros(2)}, {}, kind="dataset")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "d")

    def test_truncated_blob(self, tmp_path):
        save_bundle(tmp_path / "d", {"a": np.arange(4.0)}, {}, kind="x")
        blob = next(p for p in (tmp_path / "d").iterdir() if p.suffix == ".bin")
        blob.write_bytes(blob.read_bytes()[:-3])
        with pytest.raises(FormatError):
            load_bundle(tmp_path / "d")

    def test_integer_arrays_round_trip(self, tmp_path):
        save_bundle(tmp_path / "d", {"i": np.array([1, -2, 3]), "f": np.eye(2)}, {"k": 1}, kind="x")
        arrays, meta, kind = load_bundle(tmp_path / "d", kind="x")
        assert arrays["i"].dtype == np.int64 and arrays["i"].tolist() == [1, -2, 3]
        assert meta == {"k": 1} and kind == "x"

    def test_overwrite(self, tmp_path):
        save_bundle(tmp_path / "d", {"a": np.zeros(2)}, {}, kind="x")
        save_bundle(tmp_path / "d", {"b": np.ones(3)}, {}, kind="x")
        arrays, _, _ = load_bundle(tmp_path / "d")
        assert list(arrays) == ["b"]
