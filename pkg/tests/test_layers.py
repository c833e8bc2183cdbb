import numpy as np
import pytest

from strokeforge import autodiff as ad
from strokeforge.autodiff import GeometryError, Tensor, gradcheck
from strokeforge.layers import (ConfigError, SqueezeExcite, SwitchNorm, UNet,
                                UNetSpec, clone_network, extractor_spec,
                                generator_spec, segmentor_spec, xavier_init)


class Holder:
    def __init__(self):
        self.params = {}
        self.buffers = {}

    def reg(self, name, array):
        t = Tensor(array, requires_grad=True)
        self.params[name] = t
        return t

    def regb(self, name, array):
        arr = np.asarray(array, dtype=np.float64)
        self.buffers[name] = arr
        return arr


class TestSqueezeExcite:
    def test_zero_weights_halve_input(self, rng):
        h = Holder()
        se = SqueezeExcite(h.reg, "se", c=8, reduction=4)
        x = rng.normal(size=(2, 8, 4, 4))
        out = se(Tensor(x))
        assert np.allclose(out.data, 0.5 * x)

    def test_per_channel_ratio_constant_over_space(self, rng):
        h = Holder()
        se = SqueezeExcite(h.reg, "se", c=4, reduction=4)
        for t in h.params.values():
            t.data[...] = rng.uniform(-1, 1, size=t.shape)
        x = rng.uniform(0.5, 1.5, size=(2, 4, 6, 6))
        out = se(Tensor(x)).data
        ratio = out / x
        assert np.allclose(ratio, ratio[:, :, :1, :1])

    def test_saturated_gate_is_identity(self, rng):
        h = Holder()
        se = SqueezeExcite(h.reg, "se", c=4, reduction=2)
        h.params["se.fc2.b"].data[...] = 50.0   # sigmoid -> 1
        x = rng.normal(size=(1, 4, 3, 3))
        assert np.allclose(se(Tensor(x)).data, x)

    def test_reduction_larger_than_channels_rejected(self):
        h = Holder()
        with pytest.raises(ConfigError):
            SqueezeExcite(h.reg, "se", c=2, reduction=4)

    def test_gradcheck(self, rng):
        h = Holder()
        se = SqueezeExcite(h.reg, "se", c=4, reduction=4)
        for t in h.params.values():
            t.data[...] = rng.uniform(-0.8, 0.8, size=t.shape)
        x = Tensor(rng.normal(size=(2, 4, 3, 3)), requires_grad=True)
        err = gradcheck(lambda v: ad.square(se(v)).sum(), x)
        assert err < 1e-4


class TestSwitchNorm:
    def make(self, c=4):
        h = Holder()
        sn = SwitchNorm(h.reg, h.regb, "sn", c)
        return h, sn

    def test_constant_input_returns_beta(self, rng):
        h, sn = self.make()
        h.params["sn.beta"].data[...] = rng.normal(size=(1, 4, 1, 1))
        x = Tensor(np.full((2, 4, 3, 3), 7.5))
        out = sn(x, training=True)
        assert np.allclose(out.data, np.broadcast_to(h.params["sn.beta"].data,
                                                     (2, 4, 3, 3)), atol=1e-9)

    def test_instance_stat_selection_matches_instance_norm(self, rng):
        h, sn = self.make()
        big = 60.0
        h.params["sn.lam_mean"].data[...] = [big, -big, -big]
        h.params["sn.lam_var"].data[...] = [big, -big, -big]
        x = rng.normal(size=(3, 4, 5, 5)) * 2 + 1
        out = sn(Tensor(x), training=True).data
        mu = x.mean(axis=(2, 3), keepdims=True)
        var = x.var(axis=(2, 3), keepdims=True)
        want = (x - mu) / np.sqrt(var + sn.eps)
        assert np.allclose(out, want, atol=1e-10)

    def test_inference_is_deterministic_per_sample(self, rng):
        h, sn = self.make()
        x = rng.normal(size=(2, 4, 4, 4))
        other = rng.normal(size=(1, 4, 4, 4))
        a = sn(Tensor(x), training=False).data
        b = sn(Tensor(np.concatenate([x, other])), training=False).data[:2]
        assert np.array_equal(a, b)

    def test_running_stats_updated_only_in_training(self, rng):
        h, sn = self.make()
        before = sn.running_mean.copy()
        sn(Tensor(rng.normal(size=(2, 4, 4, 4)) + 3.0), training=False)
        assert np.array_equal(before, sn.running_mean)
        sn(Tensor(rng.normal(size=(2, 4, 4, 4)) + 3.0), training=True)
        assert not np.array_equal(before, sn.running_mean)

    def test_gradcheck_including_logits(self, rng):
        # comfortable per-instance variance keeps the 1/sqrt(var) curvature
        # low enough for eps=1e-4 central differences
        h, sn = self.make()
        x = Tensor(2.0 * rng.normal(size=(2, 4, 4, 4)), requires_grad=True)
        err = gradcheck(lambda v: ad.square(sn(v, training=True)).sum(), x)
        assert err < 1e-4
        for pname in ("sn.lam_mean", "sn.lam_var", "sn.gamma", "sn.beta"):
            p = h.params[pname]
            xc = Tensor(x.data)
            err = gradcheck(lambda q: ad.square(sn(xc, training=True)).sum(), p)
            assert err < 1e-4, pname


class TestUNet:
    def test_shape_law(self, rng):
        net = UNet(UNetSpec(6, 1, base_channels=8, depth=3))
        xavier_init(net, 0)
        out = net(Tensor(rng.normal(size=(1, 6, 64, 64))), training=True)
        assert out.shape == (1, 1, 64, 64)

    def test_output_spatial_equals_input_spatial(self, rng):
        net = UNet(UNetSpec(2, 2, base_channels=4, depth=2, use_se=True,
                            norm_kind="switchable"))
        xavier_init(net, 1)
        for size in (8, 16):
            out = net(Tensor(rng.normal(size=(2, 2, size, size))), training=True)
            assert out.shape == (2, 2, size, size)

    def test_doubling_base_quadruples_stage_conv_params(self):
        # holds for every conv whose fan-in and fan-out both scale with base;
        # the stem conv (fixed in_channels) and the 1x1 head double instead
        small = UNet(UNetSpec(3, 1, base_channels=4, depth=3))
        big = UNet(UNetSpec(3, 1, base_channels=8, depth=3))
        for name, t in small.params.items():
            if not name.endswith(".w") or t.data.shape[-1] == 1:
                continue
            ratio = big.params[name].size / t.size
            expected = 2.0 if name == "enc1.conv1.w" else 4.0
            assert ratio == expected, name

    def test_extractor_paper_scale_accepts_256(self, rng):
        net = UNet(extractor_spec("paper"), image_size=256)
        xavier_init(net, 2)
        out = net(Tensor(rng.normal(size=(1, 6, 256, 256))), training=False)
        assert out.shape == (1, 1, 256, 256)

    def test_extractor_halves_segmentor_base(self):
        for scale in ("desk", "paper"):
            assert (extractor_spec(scale).base_channels * 2
                    == segmentor_spec(scale).base_channels)

    def test_indivisible_extent_rejected(self):
        with pytest.raises(GeometryError):
            UNet(UNetSpec(1, 1, base_channels=4, depth=3), image_size=20)
        net = UNet(UNetSpec(1, 1, base_channels=4, depth=3))
        with pytest.raises(GeometryError):
            net(Tensor(np.zeros((1, 1, 20, 20))))

    def test_all_parameters_reach_gradient(self, rng):
        # the artifact's own desk segmentor preset: channel counts are wide
        # enough that no SE gate unit is dead at init
        net = UNet(segmentor_spec("desk"))
        xavier_init(net, 3)
        x = Tensor(rng.normal(size=(4, 1, 16, 16)))
        loss = ad.tmean(ad.square(net(x, training=True)))
        net.zero_grad()
        loss.backward()
        for name, t in net.parameters():
            assert t.grad is not None, name
            assert np.any(t.grad != 0.0), name

    def test_generator_preset_sigmoid_range(self, rng):
        net = UNet(generator_spec("desk"))
        xavier_init(net, 4)
        out = net(Tensor(rng.normal(size=(1, 7, 16, 16))), training=True)
        assert np.all(out.data > 0) and np.all(out.data < 1)

    def test_clone_network_matches_and_is_independent(self, rng):
        net = UNet(UNetSpec(1, 1, base_channels=4, depth=2))
        xavier_init(net, 5)
        twin = clone_network(net)
        x = Tensor(rng.normal(size=(1, 1, 8, 8)))
        assert np.array_equal(net(x, training=False).data,
                              twin(x, training=False).data)
        twin.params["head.w"].data[...] += 1.0
        assert not np.array_equal(net.params["head.w"].data,
                                  twin.params["head.w"].data)


class TestXavier:
    def test_same_seed_identical(self):
        a = UNet(UNetSpec(2, 1, base_channels=4, depth=2))
        b = UNet(UNetSpec(2, 1, base_channels=4, depth=2))
        xavier_init(a, 11)
        xavier_init(b, 11)
        for name, t in a.parameters():
            assert np.array_equal(t.data, b.params[name].data), name

    def test_bounds_never_exceeded(self):
        net = UNet(UNetSpec(4, 4, base_channels=32, depth=1))
        xavier_init(net, 12)
        total = 0
        for name, t in net.parameters():
            if not name.endswith(".w"):
                continue
            k, c, kh, kw = t.shape
            limit = np.sqrt(6.0 / (c * kh * kw + k * kh * kw))
            assert np.all(np.abs(t.data) <= limit), name
            total += t.size
        assert total > 1e5   # support check over at least 1e5 draws

    def test_empirical_variance_matches_uniform_law(self):
        net = UNet(UNetSpec(1, 1, base_channels=1, depth=1))
        # use a dedicated 64x64 1x1-kernel layer: fan_in = fan_out = 64
        h = Holder()
        from strokeforge.layers import Conv
        conv = Conv(h.reg, "fc", 64, 64, k=1)
        rng = np.random.default_rng(13)
        limit = np.sqrt(6.0 / (64 + 64))
        conv.w.data[...] = rng.uniform(-limit, limit, size=conv.w.shape)
        want = 2.0 / (64 + 64)
        got = conv.w.data.var()
        assert abs(got - want) / want < 0.10

    def test_biases_zero_norm_params_identity(self):
        net = UNet(UNetSpec(2, 2, base_channels=4, depth=2, use_se=True,
                            norm_kind="switchable"))
        xavier_init(net, 14)
        for name, t in net.parameters():
            if name.endswith((".b", ".beta")):
                assert np.all(t.data == 0.0), name
            elif name.endswith(".gamma"):
                assert np.all(t.data == 1.0), name
