from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npmatch import diffcore as dc
from npmatch.divergence import VAR_FLOOR, DiagonalGaussian
from npmatch.npmodel import (
    MemoryBank,
    ModelConfig,
    NPModel,
    PredictionBatch,
    aggregate,
    backbone_forward,
    canonical_order,
    decode_classify,
    decode_logits,
    encode_points,
    entropy,
    init_params,
    latent_distribution,
    memory_push,
    one_hot,
    predict,
    sample_latent,
)

SMALL = ModelConfig(n_classes=3, feature_dim=8, backbone_hidden=8, hidden_units=8, latent_dim=4,
                    bank_capacity=16)


def small_model(seed=0, **kw):
    cfg = ModelConfig(**{**SMALL.__dict__, **kw})
    return NPModel(cfg, seed=seed)


def zero(params, *names):
    for n in names:
        params[n].data[...] = 0.0


class TestMemoryBank:
    def test_fifo_example(self):
        bank = MemoryBank(3, 1)
        for v in "abcd":
            bank.push([[float(ord(v))]])
        np.testing.assert_array_equal(bank.contents().ravel(), [ord("b"), ord("c"), ord("d")])

    def test_push_empty_is_noop(self):
        bank = MemoryBank(3, 2).push([[1.0, 2.0]])
        before = bank.contents()
        memory_push(bank, np.zeros((0, 2)))
        np.testing.assert_array_equal(bank.contents(), before)
        assert bank.pushed == 1

    def test_summary_is_mean_of_retained(self):
        bank = MemoryBank(3, 2)
        bank.push(np.arange(10.0).reshape(5, 2))
        np.testing.assert_allclose(bank.summary(), [[6.0, 7.0]], rtol=1e-15)

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            MemoryBank(3, 2).push(np.ones((1, 3)))

    def test_empty_summary_rejected(self):
        with pytest.raises(ValueError):
            MemoryBank(3, 2).summary()

    def test_bad_capacity(self):
        with pytest.raises(ValueError):
            MemoryBank(0, 2)

    def test_random_vector_initialisation(self):
        a = MemoryBank.with_random_vector(5, 4, seed=1)
        b = MemoryBank.with_random_vector(5, 4, seed=1)
        assert len(a) == 1
        np.testing.assert_array_equal(a.contents(), b.contents())

    def test_state_round_trip_preserves_order(self):
        bank = MemoryBank(4, 1)
        bank.push(np.arange(7.0)[:, None])
        copy = bank.copy()
        for b in (bank, copy):
            b.push([[100.0]])
        np.testing.assert_array_equal(bank.contents(), copy.contents())
        np.testing.assert_array_equal(bank.summary(), copy.summary())

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 6), st.lists(st.integers(0, 9), max_size=12))
    def test_matches_reference_queue(self, capacity, sizes):
        bank = MemoryBank(capacity, 2)
        ref = deque(maxlen=capacity)
        counter = 0
        for n in sizes:
            rows = np.arange(counter, counter + n, dtype=float)[:, None].repeat(2, axis=1)
            counter += n
            bank.push(rows)
            ref.extend(rows)
            assert len(bank) == len(ref) <= capacity
            np.testing.assert_array_equal(bank.contents(), np.array(ref).reshape(-1, 2))
            if ref:
                np.testing.assert_allclose(bank.summary()[0], np.mean(ref, axis=0), rtol=1e-14)
        assert bank.pushed == counter


class TestBackbone:
    def test_default_width(self):
        model = NPModel(ModelConfig(n_classes=2))
        assert model.features(np.zeros((5, 2))).shape == (5, 64)

    def test_zero_final_layer_gives_zero_features(self):
        model = small_model()
        zero(model.params, "bb.w2", "bb.b2")
        x = np.random.default_rng(0).standard_normal((4, 2))
        assert not backbone_forward(x, model.params, model.cfg).data.any()

    def test_zero_final_conv_gives_zero_features(self):
        cfg = ModelConfig(n_classes=3, input_kind="image", input_dim=12, feature_dim=8,
                          conv_channels=(4, 4), hidden_units=8, latent_dim=4)
        params = init_params(cfg, 0)
        zero(params, "bb.c3", "bb.cb3")
        x = np.random.default_rng(0).uniform(size=(2, 1, 12, 12))
        out = backbone_forward(x, params, cfg).data
        assert out.shape == (2, 8) and not out.any()

    def test_deterministic(self):
        model = small_model()
        x = np.random.default_rng(1).standard_normal((6, 2))
        np.testing.assert_array_equal(model.features(x).data, model.features(x).data)

    def test_shape_mismatch(self):
        with pytest.raises(dc.ShapeError):
            small_model().features(np.zeros((3, 5)))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(n_classes=1)
        with pytest.raises(ValueError):
            ModelConfig(n_classes=2, input_kind="audio")


class TestEncodeAggregate:
    def setup_method(self):
        self.model = small_model()
        rng = np.random.default_rng(2)
        self.f = rng.standard_normal((7, 8))
        self.y = one_hot(rng.integers(0, 3, 7), 3)

    def test_empty(self):
        out = encode_points(np.zeros((0, 8)), np.zeros((0, 3)), self.model.params)
        assert out.shape[0] == 0

    def test_single_point_is_the_mlp(self):
        p = self.model.params
        out = encode_points(self.f[:1], self.y[:1], p, "det").data
        x = np.hstack([self.f[:1], self.y[:1]])
        h = np.maximum(x @ p["det.w1"].data + p["det.b1"].data, 0)
        want = h @ p["det.w2"].data + p["det.b2"].data
        np.testing.assert_allclose(out, want, rtol=1e-13)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            encode_points(self.f, self.y[:3], self.model.params)

    @pytest.mark.parametrize("path", ["latent", "det"])
    def test_permutation_equivariant(self, path):
        perm = np.random.default_rng(3).permutation(7)
        a = encode_points(self.f, self.y, self.model.params, path).data
        b = encode_points(self.f[perm], self.y[perm], self.model.params, path).data
        np.testing.assert_array_equal(a[perm], b)

    def test_aggregate_single(self):
        v = np.array([[0.1, -2.0, 3.5]])
        np.testing.assert_array_equal(aggregate(v).data, v)

    def test_aggregate_cancels(self):
        v = np.random.default_rng(4).standard_normal((1, 5))
        assert not aggregate(np.vstack([v, -v])).data.any()

    def test_aggregate_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate(np.zeros((0, 3)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 40))
    def test_aggregate_permutation_bit_identical(self, seed, n):
        rng = np.random.default_rng(seed)
        r = rng.standard_normal((n, 6)) * 10.0 ** rng.integers(-8, 8, size=(n, 1))
        np.testing.assert_array_equal(aggregate(r).data, aggregate(r[rng.permutation(n)]).data)

    def test_canonical_order_sorts_bytes(self):
        rows = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        order = canonical_order(rows)
        assert sorted(order) == [0, 1, 2]
        # equal rows stay in input order and the result is a byte sort
        assert list(order).index(0) < list(order).index(2)
        keys = [rows[i].tobytes() for i in order]
        assert keys == sorted(keys)


class TestLatent:
    def test_zero_heads(self):
        params = small_model().params
        zero(params, "mu.w2", "mu.b2", "var.w2", "var.b2")
        dist = latent_distribution(np.ones((1, 8)), params)
        assert not dist.mean.data.any()
        np.testing.assert_allclose(dist.variance.data, VAR_FLOOR + (1 - VAR_FLOOR) / 2, rtol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(1e-3, 10.0))
    def test_variance_range(self, seed, scale):
        rep = np.random.default_rng(seed).standard_normal((1, 8)) * scale
        v = latent_distribution(rep, small_model(seed % 7).params).variance.data
        assert np.all((v >= VAR_FLOOR) & (v < 1.0))

    def test_variance_saturates_at_one(self):
        # logistic(x) rounds to exactly 1.0 for x beyond ~37 in float64
        v = latent_distribution(np.full((1, 8), 1e4), small_model().params).variance.data
        assert np.all((v >= VAR_FLOOR) & (v <= 1.0))

    def test_identical_representations(self):
        params = small_model().params
        a = latent_distribution(np.ones((1, 8)), params)
        b = latent_distribution(np.ones((1, 8)), params)
        np.testing.assert_array_equal(a.numpy(), b.numpy())

    def test_floor_variance_collapses_samples(self):
        mean = np.array([0.3, -1.0, 2.0])
        z = sample_latent(DiagonalGaussian(mean, np.full(3, VAR_FLOOR)), 3, seed=0).data
        assert np.all(np.abs(z - mean) <= np.sqrt(VAR_FLOOR) * 6)

    def test_seeded(self):
        d = DiagonalGaussian(np.zeros(4), np.ones(4))
        np.testing.assert_array_equal(sample_latent(d, 5, 9).data, sample_latent(d, 5, 9).data)

    def test_sample_mean_converges(self):
        mean, var = np.array([0.5, -2.0]), np.array([0.3, 0.9])
        T = 10**5
        z = sample_latent(DiagonalGaussian(mean, var), T, seed=1).data
        assert np.all(np.abs(z.mean(axis=0) - mean) <= 4 * np.sqrt(var / T))

    def test_bad_T(self):
        with pytest.raises(ValueError):
            sample_latent(DiagonalGaussian(np.zeros(1), np.ones(1)), 0, 0)

    def test_reparameterised_gradients(self):
        eta_seed = 5

        def fn_mean(m):
            z = sample_latent(DiagonalGaussian(m, dc.Tensor(np.full(3, 0.4))), 4, eta_seed)
            return (z * z).sum()

        def fn_var(v):
            z = sample_latent(DiagonalGaussian(dc.Tensor(np.zeros(3)), v), 4, eta_seed)
            return (z * z).sum()

        assert dc.grad_check(fn_mean, np.array([0.1, 0.2, -0.3])) < 1e-4
        assert dc.grad_check(fn_var, np.array([0.5, 0.7, 0.2])) < 1e-4


class TestDecode:
    def setup_method(self):
        self.model = small_model()
        rng = np.random.default_rng(6)
        self.f = rng.standard_normal((5, 8))
        self.d = rng.standard_normal((1, 8))

    def test_identical_latents(self):
        z = np.tile(np.random.default_rng(0).standard_normal((1, 4)), (3, 1))
        out = decode_classify(self.f, z, self.d, self.model.params)
        np.testing.assert_array_equal(out[0], out[1])
        np.testing.assert_array_equal(out[0], out[2])

    def test_rows_are_distributions(self):
        z = np.random.default_rng(1).standard_normal((4, 4))
        out = decode_classify(self.f, z, self.d, self.model.params)
        assert out.shape == (4, 5, 3)
        assert np.all(np.abs(out.sum(axis=2) - 1) <= 1e-9)

    def test_zero_classifier_is_uniform(self):
        model = small_model(n_classes=10)
        zero(model.params, "cls.W")
        out = decode_classify(self.f, np.ones((2, 4)), self.d, model.params)
        np.testing.assert_allclose(out, 0.1, rtol=1e-15)

    def test_blockwise_first_layer_matches_concatenation(self):
        p = self.model.params
        z = np.random.default_rng(2).standard_normal((3, 4))
        logits = decode_logits(self.f, z, self.d, p).data
        # direct reference: concat(f_i, z_t, d) for row t*N + i
        n, T = 5, 3
        x = np.hstack([np.tile(self.f, (T, 1)), np.repeat(z, n, axis=0), np.tile(self.d, (T * n, 1))])
        h = np.maximum(x @ p["dec.w1"].data + p["dec.b1"].data, 0)
        h = np.maximum(h @ p["dec.w2"].data + p["dec.b2"].data, 0)
        np.testing.assert_allclose(logits, h @ p["cls.W"].data.T, rtol=1e-12, atol=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(dc.ShapeError):
            decode_logits(self.f, np.ones((2, 5)), self.d, self.model.params)


class TestPredict:
    def test_uniform_members(self):
        batch = PredictionBatch(np.full((4, 2, 10), 0.1))
        np.testing.assert_allclose(batch.uncertainty, np.log(10), rtol=1e-15)
        assert batch.uncertainty[0] == pytest.approx(2.302585, abs=1e-6)

    def test_identical_one_hot_members(self):
        batch = PredictionBatch(np.tile(np.eye(3)[[1]], (5, 1, 1)))
        assert batch.uncertainty[0] == 0.0
        assert batch.labels[0] == 1

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_entropy_of_average_dominates(self, seed):
        rng = np.random.default_rng(seed)
        members = rng.dirichlet(np.ones(4), size=(6, 3))
        batch = PredictionBatch(members)
        avg_member_entropy = entropy(members.reshape(-1, 4)).reshape(6, 3).mean(axis=0)
        assert np.all(batch.uncertainty >= avg_member_entropy - 1e-12)

    def test_empty_features(self):
        assert len(small_model().predict(np.zeros((0, 8)))) == 0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 12))
    def test_valid_distributions(self, seed, T):
        model = small_model(seed % 5)
        f = np.random.default_rng(seed).standard_normal((9, 8)) * 3
        batch = model.predict(f, T=T, seed=seed)
        assert np.all(np.abs(batch.probs.sum(axis=1) - 1) <= 1e-9)
        assert np.all((batch.probs >= 0) & (batch.probs <= 1))
        assert np.all((batch.uncertainty >= 0) & (batch.uncertainty <= np.log(3) + 1e-12))
        np.testing.assert_allclose(batch.uncertainty, entropy(batch.probs))
        assert batch[0].members.shape == (T, 3)

    def test_context_mode_matches_manual_pipeline(self):
        model = small_model()
        rng = np.random.default_rng(7)
        f, cf, cy = rng.standard_normal((4, 8)), rng.standard_normal((6, 8)), rng.integers(0, 3, 6)
        batch = predict(f, model, T=3, seed=2, context=(cf, cy))
        y = one_hot(cy, 3)
        p = model.params
        dist = latent_distribution(aggregate(encode_points(cf, y, p, "latent")), p)
        d = aggregate(encode_points(cf, y, p, "det"))
        z = sample_latent(dist, 3, 2)
        want = decode_classify(f, z, d, p).mean(axis=0)
        np.testing.assert_allclose(batch.probs, want, rtol=1e-12, atol=1e-15)

    def test_exchangeable_in_targets_and_context(self):
        model = small_model()
        rng = np.random.default_rng(8)
        f, cf, cy = rng.standard_normal((11, 8)), rng.standard_normal((9, 8)), rng.integers(0, 3, 9)
        ref = model.predict(f, T=4, seed=1, context=(cf, cy))
        for _ in range(10):
            pt, pc = rng.permutation(11), rng.permutation(9)
            out = model.predict(f[pt], T=4, seed=1, context=(cf[pc], cy[pc]))
            np.testing.assert_array_equal(out.probs, ref.probs[pt])
            np.testing.assert_array_equal(out.uncertainty, ref.uncertainty[pt])

    def test_inference_mode_uses_banks(self):
        model = small_model()
        f = np.random.default_rng(9).standard_normal((3, 8))
        before = model.predict(f, T=2, seed=0).probs
        model.latent_bank.push(np.full((16, 8), 5.0))
        after = model.predict(f, T=2, seed=0).probs
        assert not np.array_equal(before, after)

    def test_with_params_shares_banks(self):
        model = small_model()
        view = model.with_params(model.param_arrays())
        assert view.latent_bank is model.latent_bank and view.det_bank is model.det_bank


def test_end_to_end_gradients_reach_every_parameter_group():
    # reduced widths F=8, L=4, M=8 with T=3 latent draws
    model = small_model()
    rng = np.random.default_rng(10)
    # nonzero biases keep every relu off its kink
    for name, t in model.params.items():
        if ".b" in name:
            t.data[...] = rng.uniform(0.05, 0.3, t.shape)
    x = rng.standard_normal((5, 2))
    cy = one_hot(rng.integers(0, 3, 3), 3)
    ty = rng.integers(0, 3, 5)
    names = sorted(model.params)

    def loss_with(name):
        def fn(w):
            p = dict(model.params)
            p[name] = w
            f = backbone_forward(x, p, model.cfg)
            ctx = dc.take_rows(f, np.arange(3))
            dist = latent_distribution(aggregate(encode_points(ctx, cy, p, "latent")), p)
            d = aggregate(encode_points(ctx, cy, p, "det"))
            z = sample_latent(dist, 3, seed=4)
            logp = dc.log_softmax_rows(decode_logits(f, z, d, p))
            return dc.pick(logp, np.arange(15), np.tile(ty, 3)).sum() * (-1.0 / 15)
        return fn

    for name in names:
        assert dc.grad_check(loss_with(name), model.params[name].data) < 1e-4, name
