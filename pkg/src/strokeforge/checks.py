"""Finite-difference verification battery over every differentiable operation
plus the full three-network composite. Shared by the ``gradcheck`` CLI command
and the acceptance suite.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .geometry import heatmap_for_mask
from .layers import (ConvBlock, SqueezeExcite, UNet, UNetSpec, clone_network,
                     xavier_init)
from .losses import (extractor_loss, generalized_dice, generator_loss,
                     pr_loss, weighted_ce)
from .pipeline import PipelineState, PreparedCase, TrainConfig

TOLERANCE = 1e-4


class _Registry:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.results = []

    def check(self, name, f, x, sample=None):
        err = ad.gradcheck(f, x, eps=1e-4, sample=sample, rng=self.rng)
        self.results.append((name, err, err < TOLERANCE))

    def tensor(self, shape, lo=-1.0, hi=1.0, away_from=None):
        data = self.rng.uniform(lo, hi, size=shape)
        if away_from is not None:
            # keep values off kinks so central differences stay valid
            data = np.where(np.abs(data - away_from) < 0.01,
                            data + 0.05, data)
        return ad.Tensor(data, requires_grad=True)


def _elementwise_checks(reg: _Registry):
    b = ad.Tensor(reg.rng.uniform(0.5, 1.5, size=(3, 4)))
    reg.check("add", lambda x: (x + b).sum(), reg.tensor((3, 4)))
    reg.check("sub", lambda x: (x - b).sum(), reg.tensor((3, 4)))
    reg.check("mul", lambda x: (x * b).mean(), reg.tensor((3, 4)))
    reg.check("div", lambda x: (x / b).mean(), reg.tensor((3, 4)))
    reg.check("div_denominator", lambda x: (b / x).mean(), reg.tensor((3, 4), 0.5, 1.5))
    reg.check("exp", lambda x: ad.exp(x).sum(), reg.tensor((3, 4)))
    reg.check("log", lambda x: ad.log(x).sum(), reg.tensor((3, 4), 0.2, 2.0))
    reg.check("abs", lambda x: ad.absval(x).sum(), reg.tensor((3, 4), away_from=0.0))
    reg.check("square", lambda x: ad.square(x).sum(), reg.tensor((3, 4)))
    reg.check("sqrt", lambda x: ad.sqrt(x).sum(), reg.tensor((3, 4), 0.2, 2.0))
    wide = ad.Tensor(reg.rng.uniform(size=(2, 3, 4)))
    reg.check("broadcast_add", lambda x: ad.square(wide + x).sum(), reg.tensor((1, 4)))
    reg.check("broadcast_mul", lambda x: ad.square(wide * x).sum(), reg.tensor((3, 1)))


def _activation_checks(reg: _Registry):
    reg.check("relu", lambda x: ad.relu(x).sum(), reg.tensor((3, 4), away_from=0.0))
    reg.check("sigmoid", lambda x: ad.sigmoid(x).sum(), reg.tensor((3, 4), -3, 3))
    reg.check("softmax", lambda x: ad.square(ad.softmax(x, axis=1)).sum(),
              reg.tensor((3, 4), -2, 2))
    reg.check("reduce_sum_axis", lambda x: ad.square(x.sum(axes=0)).sum(),
              reg.tensor((3, 4)))
    reg.check("reduce_mean_axis", lambda x: ad.square(x.mean(axes=(1,))).sum(),
              reg.tensor((3, 4)))


def _conv_pool_checks(reg: _Registry):
    x = reg.tensor((2, 1, 4, 4))
    k = reg.tensor((2, 1, 3, 3))
    b = reg.tensor((2,))
    kc, bc = ad.Tensor(k.data.copy()), ad.Tensor(b.data.copy())
    xc = ad.Tensor(x.data.copy())
    reg.check("conv2d_input", lambda t: ad.conv2d(t, kc, bc).sum(), x)
    reg.check("conv2d_kernel", lambda t: ad.conv2d(xc, t, bc).sum(), k)
    reg.check("conv2d_bias", lambda t: ad.square(ad.conv2d(xc, kc, t)).sum(), b)
    x2 = reg.tensor((1, 2, 7, 7))
    k2 = ad.Tensor(reg.rng.uniform(-1, 1, size=(3, 2, 3, 3)))
    b2 = ad.Tensor(reg.rng.uniform(-1, 1, size=3))
    reg.check("conv2d_stride2", lambda t: ad.square(
        ad.conv2d(t, k2, b2, stride=2, padding=1)).sum(), x2)
    reg.check("maxpool2", lambda t: ad.square(ad.maxpool2(t)).sum(),
              reg.tensor((2, 2, 4, 4)))
    reg.check("avgpool_global", lambda t: ad.square(ad.avgpool_global(t)).sum(),
              reg.tensor((2, 2, 4, 4)))
    reg.check("upsample_nearest2", lambda t: ad.square(ad.upsample_nearest2(t)).sum(),
              reg.tensor((2, 2, 3, 3)))
    other = ad.Tensor(reg.rng.uniform(size=(2, 3, 4, 4)))
    reg.check("concat_channels", lambda t: ad.square(ad.concat_channels(t, other)).sum(),
              reg.tensor((2, 2, 4, 4)))


class _Holder:
    """Minimal parameter registry for checking single layers."""

    def __init__(self):
        self.params = {}

    def register(self, name, array):
        t = ad.Tensor(array, requires_grad=True)
        self.params[name] = t
        return t

    def register_buffer(self, name, array):
        arr = np.asarray(array, dtype=np.float64)
        self.params.setdefault("__buffers__", {})[name] = arr
        return arr


def _layer_checks(reg: _Registry):
    holder = _Holder()
    se = SqueezeExcite(holder.register, "se", c=4, reduction=4)
    for t in holder.params.values():
        if isinstance(t, ad.Tensor):
            t.data[...] = reg.rng.uniform(-0.8, 0.8, size=t.shape)
    x = reg.tensor((2, 4, 4, 4))
    reg.check("se_block_input", lambda t: ad.square(se(t)).sum(), x)
    reg.check("se_block_fc1", lambda t: ad.square(se(ad.Tensor(x.data))).sum(),
              holder.params["se.fc1.w"])
    reg.check("se_block_fc2", lambda t: ad.square(se(ad.Tensor(x.data))).sum(),
              holder.params["se.fc2.w"])

    holder2 = _Holder()
    block = ConvBlock(holder2.register, holder2.register_buffer, "blk", 2, 4,
                      norm_kind="switchable", use_se=True, se_reduction=4)
    for name, t in holder2.params.items():
        if isinstance(t, ad.Tensor) and name.endswith(".w"):
            t.data[...] = reg.rng.uniform(-0.5, 0.5, size=t.shape)
    sn = block.norm1
    xn = reg.tensor((2, 4, 4, 4), -2, 2)
    xin = ad.Tensor(reg.rng.normal(size=(2, 2, 4, 4)))

    def through_norm(t):
        return ad.square(sn(t, training=True)).sum()

    reg.check("switch_norm_input", through_norm, reg.tensor((2, 4, 4, 4), -2, 2))
    reg.check("switch_norm_gamma", lambda t: ad.square(sn(xn, training=True)).sum(),
              sn.gamma)
    reg.check("switch_norm_lam_mean", lambda t: ad.square(sn(xn, training=True)).sum(),
              sn.lam_mean)
    reg.check("switch_norm_lam_var", lambda t: ad.square(sn(xn, training=True)).sum(),
              sn.lam_var)
    reg.check("conv_block_input", lambda t: ad.square(block(t, training=True)).sum(), xin)


def _loss_checks(reg: _Registry):
    n, h, w = 1, 8, 8
    mask = (reg.rng.uniform(size=(n, 1, h, w)) < 0.3).astype(np.float64)
    p = reg.tensor((n, 1, h, w), 0.05, 0.95)
    reg.check("extractor_loss", lambda t: extractor_loss(t, mask, alpha=1.3), p)

    weight = heatmap_for_mask(mask[0, 0], w0=4.0, sigma=2.0)[None, None]
    onehot = np.concatenate([1.0 - mask, mask], axis=1)
    probs = reg.tensor((n, 2, h, w), 0.1, 0.9)
    reg.check("generalized_dice", lambda t: generalized_dice(t, onehot), probs)
    reg.check("weighted_ce", lambda t: weighted_ce(t, onehot, weight), probs)
    reg.check("pr_loss", lambda t: pr_loss(t, onehot, weight, delta=1.1), probs)

    target = reg.rng.uniform(0.2, 0.8, size=(n, 1, h, w))
    feat_net = UNet(UNetSpec(1, 1, base_channels=2, depth=2, norm_kind="none"))
    xavier_init(feat_net, 5)

    def feat(img):
        return feat_net.encoder_features(img, n_stages=2, detach_params=True)

    dwi_g = reg.tensor((n, 1, h, w), 0.1, 0.9)
    reg.check("generator_loss",
              lambda t: generator_loss(t, target, weight, feat, beta=0.7, gamma=1.2),
              dwi_g)


def _make_prepared(reg: _Registry, size=8):
    mask = np.zeros((size, size))
    mask[2:5, 3:6] = 1.0
    return PreparedCase(
        case_id="check",
        frames6=reg.rng.normal(size=(6, size, size)),
        maps4=reg.rng.normal(size=(4, size, size)),
        ctp_mean=reg.rng.normal(size=(1, size, size)),
        dwi01=reg.rng.uniform(0.1, 0.9, size=(1, size, size)),
        mask=mask,
        onehot=np.stack([1.0 - mask, mask]),
        weight=heatmap_for_mask(mask, 4.0, 2.0)[None],
        detection_fallback=False,
    )


def composite_gradcheck(seed=0, samples_per_tensor=3, eps=1e-6):
    """Central differences through extractor+generator+segmentor training loss.

    Every parameter tensor of all three networks is spot-checked on a random
    subset of elements; returns (max relative error, number of elements).
    The step is small because the in-graph channel normalization has strong
    curvature; truncation error falls off as eps^2 while float64 keeps the
    difference quotient well above rounding noise.
    """
    rng = np.random.default_rng(seed)
    # depth 2 keeps the bottleneck at 2x2: at 1x1 the normalization statistics
    # degenerate and finite differences lose validity
    cfg = TrainConfig.desk(image_size=8, seed=seed, batch_size=2,
                           unet_depth=2, unet_base=4)
    state = PipelineState(cfg)
    # freeze the feature extractor at the current segmentor weights: this is
    # exactly the function whose gradient the optimizer uses (the feature
    # branch's parameters are gradient-stopped), and it keeps the loss a pure
    # function of the checked parameters
    state.feature_net = clone_network(state.nets["segmentor"])
    reg = _Registry(seed + 1)
    batch = [_make_prepared(reg), _make_prepared(reg)]

    def loss_value():
        outputs = state.forward_batch(batch, training=True)
        loss, _ = state.total_loss(outputs, batch)
        return float(loss.data)

    outputs = state.forward_batch(batch, training=True)
    loss, _ = state.total_loss(outputs, batch)
    state.zero_grad()
    loss.backward()

    worst = 0.0
    checked = 0
    for name, t in state._named_params():
        if t.grad is None:
            raise AssertionError(f"parameter {name} received no gradient")
        flat = t.data.reshape(-1)
        analytic = t.grad.reshape(-1)
        count = min(samples_per_tensor, flat.size)
        for i in rng.choice(flat.size, size=count, replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_value()
            flat[i] = orig - eps
            lo = loss_value()
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
            checked += 1
    return worst, checked


def run_all(seed=0, include_composite=True):
    """Returns [(name, max_rel_err, ok)] over the whole battery."""
    reg = _Registry(seed)
    _elementwise_checks(reg)
    _activation_checks(reg)
    _conv_pool_checks(reg)
    _layer_checks(reg)
    _loss_checks(reg)
    if include_composite:
        err, _ = composite_gradcheck(seed)
        reg.results.append(("three_network_composite", err, err < TOLERANCE))
    return reg.results
