import numpy as np
import pytest

from dkn import autograd as ag
from dkn.autograd import no_grad
from dkn.errors import ConfigurationError, DimensionError
from dkn.model import (FdknModel, ModelConfig, build_model, extract_features,
                       forward_full_fdkn, forward_patch, regress_offsets, regress_weights)


@pytest.fixture(scope="module")
def dkn():
    return build_model(ModelConfig(), seed=0, dtype=np.float64)


def patches(seed, size=51, channels=3):
    rng = np.random.default_rng(seed)
    return (rng.uniform(0, 1, (1, channels, size, size)),
            rng.uniform(0, 1, (1, 1, size, size)))


class TestBuild:
    def test_dkn_parameter_budget(self):
        n = build_model(ModelConfig()).parameter_count()
        assert abs(n - 1.1e6) / 1.1e6 < 0.10

    def test_fdkn_parameter_budget(self):
        n = build_model(ModelConfig(variant="fdkn")).parameter_count()
        assert abs(n - 0.6e6) / 0.6e6 < 0.10

    def test_fdkn_smaller(self):
        assert (build_model(ModelConfig(variant="fdkn")).parameter_count()
                < build_model(ModelConfig()).parameter_count())

    def test_deterministic(self):
        a = build_model(ModelConfig(), seed=7).parameters()
        b = build_model(ModelConfig(), seed=7).parameters()
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_unique_hierarchical_names(self):
        params = build_model(ModelConfig()).parameters()
        assert all(name.count(".") >= 1 for name in params)
        assert "guide.conv1.weight" in params and "depth.offset_head.bias" in params
        assert not any(n.startswith("guide") for n in
                       build_model(ModelConfig(guided=False)).parameters())

    def test_no_bias_before_batch_norm(self):
        params = build_model(ModelConfig()).parameters()
        assert "depth.conv1.bias" not in params
        assert "depth.conv2.bias" in params

    @pytest.mark.parametrize("kwargs", [dict(k=4), dict(scale=3), dict(variant="x"), dict(k=9)])
    def test_bad_config(self, kwargs):
        with pytest.raises(ConfigurationError):
            ModelConfig(**kwargs)

    def test_config_round_trip(self):
        cfg = ModelConfig(variant="fdkn", k=5, guided=False, scale=8)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestFeatures:
    def test_table1_shapes(self, dkn):
        g, t = patches(0)
        fg, ff = extract_features(dkn, g, t)
        assert fg.shape == (1, 128, 1, 1) and ff.shape == (1, 128, 1, 1)

    def test_after_first_downconv(self, dkn):
        _, t = patches(1)
        x = ag.as_tensor(t)
        stream = dkn.streams["depth"]
        conv, bn = stream.blocks[0]
        x = ag.relu(bn(conv(x)))
        conv2, _ = stream.blocks[1]
        assert conv2(x).shape == (1, 32, 22, 22)

    def test_wrong_patch_size_names_layer(self, dkn):
        g, t = patches(2, size=40)
        with pytest.raises(DimensionError, match="conv"):
            extract_features(dkn, g, t)

    def test_translation_consistency(self, dkn):
        rng = np.random.default_rng(3)
        big_g = rng.uniform(0, 1, (1, 3, 70, 70))
        big_t = rng.uniform(0, 1, (1, 1, 70, 70))
        dkn.eval()
        with no_grad():
            a = extract_features(dkn, big_g[..., 0:51, 0:51], big_t[..., 0:51, 0:51])
            moved_g = np.roll(big_g, (7, 11), axis=(2, 3))
            moved_t = np.roll(big_t, (7, 11), axis=(2, 3))
            b = extract_features(dkn, moved_g[..., 7:58, 11:62], moved_t[..., 7:58, 11:62])
        dkn.train()
        np.testing.assert_array_equal(a[0].data, b[0].data)
        np.testing.assert_array_equal(a[1].data, b[1].data)

    def test_unguided_ignores_guidance(self):
        m = build_model(ModelConfig(guided=False), seed=1, dtype=np.float64)
        g, t = patches(4)
        k1, o1 = m.fields(g, t)
        k2, o2 = m.fields(g * 0 + 0.3, t)
        np.testing.assert_array_equal(k1.data, k2.data)
        np.testing.assert_array_equal(o1.data, o2.data)

    def test_guided_sensitive(self, dkn):
        g, t = patches(5)
        k1, _ = dkn.fields(g, t)
        k2, _ = dkn.fields(np.roll(g, 5, axis=3), t)
        assert not np.array_equal(k1.data, k2.data)

    def test_guided_requires_guidance(self, dkn):
        _, t = patches(6)
        with pytest.raises(DimensionError):
            dkn.fields(None, t)


class TestHeads:
    def test_residual_sums_zero(self, dkn):
        for seed in range(5):
            fg, ff = extract_features(dkn, *patches(seed))
            k = regress_weights(dkn, fg, ff, residual=True).data
            assert np.all(np.abs(k.sum(axis=1)) < 1e-5)
            assert np.all(np.abs(k) < 1)

    def test_normalized_sums_one(self, dkn):
        for seed in range(5):
            fg, ff = extract_features(dkn, *patches(seed))
            k = regress_weights(dkn, fg, ff, residual=False).data
            assert np.all(np.abs(k.sum(axis=1) - 1) < 1e-5)
            assert np.all(k >= 0)

    def test_two_stream_product(self, dkn):
        fg, ff = extract_features(dkn, *patches(8))
        head_g = dkn.weight_heads["guide"]
        saved = head_g.weight.data.copy(), head_g.bias.data.copy()
        head_g.weight.data[...] = 0
        head_g.bias.data[...] = 0  # sigmoid(0) = 0.5
        try:
            k = regress_weights(dkn, fg, ff, residual=False).data
        finally:
            head_g.weight.data[...], head_g.bias.data[...] = saved
        raw = 0.5 * ag.sigmoid(dkn.weight_heads["depth"](ff)).data
        np.testing.assert_allclose(k, raw / raw.sum(axis=1, keepdims=True), rtol=1e-12)

    def test_offsets_shape_and_initial_grid(self, dkn):
        fg, ff = extract_features(dkn, *patches(9))
        o = regress_offsets(dkn, fg, ff)
        assert o.shape == (1, 18, 1, 1)
        assert not o.data.any()  # zero depth head: regular grid at init

    def test_offsets_restricted(self):
        m = build_model(ModelConfig(), seed=2, dtype=np.float64)
        rng = np.random.default_rng(0)
        for head in m.offset_heads.values():
            head.weight.data[...] = rng.normal(0, 5, head.weight.shape)
            head.bias.data[...] = rng.normal(0, 20, head.bias.shape)
        fg, ff = extract_features(m, *patches(10))
        o = regress_offsets(m, fg, ff).data
        disp = o + m.config.grid.base(np.float64)[None, :, None, None]
        assert np.all(np.abs(disp) <= 7)

    def test_frozen_offsets(self):
        m = build_model(ModelConfig(learn_offsets=False), seed=0, dtype=np.float64)
        assert not m.offset_heads
        _, o = m.fields(*patches(11))
        assert not o.data.any()


class TestForwardPatch:
    def test_scalar_output(self, dkn):
        assert forward_patch(dkn, *patches(0)).shape == (1, 1, 1, 1)

    def test_equal_weights_return_center(self):
        m = build_model(ModelConfig(), seed=3, dtype=np.float64)
        for head in m.weight_heads.values():
            head.weight.data[...] = 0
        g, t = patches(12)
        assert forward_patch(m, g, t).item() == t[0, 0, 25, 25]

    def test_rejects_fdkn(self):
        with pytest.raises(ConfigurationError):
            forward_patch(build_model(ModelConfig(variant="fdkn")), *patches(0))


class TestFdkn:
    def test_full_resolution_fields(self):
        m = build_model(ModelConfig(variant="fdkn"), seed=0)
        g, t = patches(0, size=24)
        k, o = forward_full_fdkn(m, g.astype(np.float32), t.astype(np.float32))
        assert k.shape == (1, 9, 24, 24) and o.shape == (1, 18, 24, 24)
        assert isinstance(m, FdknModel)

    def test_requires_divisible(self):
        m = build_model(ModelConfig(variant="fdkn"), seed=0)
        g, t = patches(0, size=22)
        with pytest.raises(DimensionError, match="multiple of 4"):
            forward_full_fdkn(m, g, t)


class TestState:
    def test_astype_and_load(self):
        m = build_model(ModelConfig(), seed=0)
        m64 = m.astype(np.float64)
        for name, p in m64.parameters().items():
            assert p.dtype == np.float64
            np.testing.assert_array_equal(p.data.astype(np.float32), m.parameters()[name].data)

    def test_load_rejects_mismatch(self):
        m = build_model(ModelConfig(), seed=0)
        params = {k: v.data for k, v in m.parameters().items()}
        params.pop("guide.conv1.weight")
        with pytest.raises(ConfigurationError):
            m.load_state(params)

    def test_train_eval_flag(self):
        m = build_model(ModelConfig(), seed=0)
        assert m.training
        m.eval()
        assert not m.training
