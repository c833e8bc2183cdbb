"""Network building blocks: conv blocks, channel attention, switchable
normalization, and the UNet assembly used by extractor, generator and
segmentor.

All parameters are float64 autodiff tensors registered by name in the owning
network; running statistics live in plain arrays (buffers) so checkpoints can
restore training bit-exactly.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .autodiff import (GeometryError, Tensor, avgpool_global, concat_channels,
                       conv2d, maxpool2, relu, sigmoid, softmax, square, sqrt,
                       tmean, upsample_nearest2)


class ConfigError(ValueError):
    """A layer or network specification is internally inconsistent."""


_ONEHOT3 = [Tensor(np.eye(3)[i]) for i in range(3)]


class Conv:
    def __init__(self, register, prefix, cin, cout, k=3, bias=True):
        self.w = register(f"{prefix}.w", np.zeros((cout, cin, k, k)))
        # a conv feeding a norm layer gets no bias: the norm would cancel it
        # exactly, leaving a dead parameter
        self.b = register(f"{prefix}.b", np.zeros(cout)) if bias else Tensor(np.zeros(cout))
        self.k = k

    def __call__(self, x, detach=False):
        w = self.w.detach() if detach else self.w
        b = self.b.detach() if detach else self.b
        return conv2d(x, w, b, stride=1, padding=self.k // 2)


class BatchNorm:
    """Per-channel batch normalization with EMA running statistics."""

    def __init__(self, register, register_buffer, prefix, c, eps=1e-5, momentum=0.1):
        self.gamma = register(f"{prefix}.gamma", np.ones((1, c, 1, 1)))
        self.beta = register(f"{prefix}.beta", np.zeros((1, c, 1, 1)))
        self.running_mean = register_buffer(f"{prefix}.running_mean", np.zeros((1, c, 1, 1)))
        self.running_var = register_buffer(f"{prefix}.running_var", np.ones((1, c, 1, 1)))
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x, training, detach=False):
        gamma = self.gamma.detach() if detach else self.gamma
        beta = self.beta.detach() if detach else self.beta
        if training:
            mean = tmean(x, (0, 2, 3), keepdims=True)
            var = relu(tmean(square(x), (0, 2, 3), keepdims=True) - square(mean))
            m = self.momentum
            self.running_mean *= 1.0 - m
            self.running_mean += m * mean.data
            self.running_var *= 1.0 - m
            self.running_var += m * var.data
        else:
            mean = Tensor(self.running_mean)
            var = Tensor(self.running_var)
        xhat = (x - mean) / sqrt(var + self.eps)
        return gamma * xhat + beta


class SwitchNorm:
    """Learned softmax mixture of instance, layer and batch statistics.

    Mixing weights for means and variances are two independent 3-way softmaxes
    over unconstrained logits. Training uses minibatch statistics for the
    batch component and maintains EMA running averages used at inference.
    """

    def __init__(self, register, register_buffer, prefix, c, eps=1e-5, momentum=0.1):
        self.gamma = register(f"{prefix}.gamma", np.ones((1, c, 1, 1)))
        self.beta = register(f"{prefix}.beta", np.zeros((1, c, 1, 1)))
        self.lam_mean = register(f"{prefix}.lam_mean", np.ones(3))
        self.lam_var = register(f"{prefix}.lam_var", np.ones(3))
        self.running_mean = register_buffer(f"{prefix}.running_mean", np.zeros((1, c, 1, 1)))
        self.running_var = register_buffer(f"{prefix}.running_var", np.ones((1, c, 1, 1)))
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x, training, detach=False):
        gamma = self.gamma.detach() if detach else self.gamma
        beta = self.beta.detach() if detach else self.beta
        lam_mean = self.lam_mean.detach() if detach else self.lam_mean
        lam_var = self.lam_var.detach() if detach else self.lam_var

        mean_in = tmean(x, (2, 3), keepdims=True)            # [N,C,1,1]
        ex2_in = tmean(square(x), (2, 3), keepdims=True)
        mean_ln = tmean(mean_in, 1, keepdims=True)           # [N,1,1,1]
        ex2_ln = tmean(ex2_in, 1, keepdims=True)
        if training:
            mean_bn = tmean(mean_in, 0, keepdims=True)       # [1,C,1,1]
            ex2_bn = tmean(ex2_in, 0, keepdims=True)
            var_bn = relu(ex2_bn - square(mean_bn))
            m = self.momentum
            self.running_mean *= 1.0 - m
            self.running_mean += m * mean_bn.data
            self.running_var *= 1.0 - m
            self.running_var += m * var_bn.data
        else:
            mean_bn = Tensor(self.running_mean)
            var_bn = Tensor(self.running_var)
        var_in = relu(ex2_in - square(mean_in))
        var_ln = relu(ex2_ln - square(mean_ln))

        wm = softmax(lam_mean, axis=0)
        wv = softmax(lam_var, axis=0)
        w = [(wm * _ONEHOT3[i]).sum() for i in range(3)]
        wp = [(wv * _ONEHOT3[i]).sum() for i in range(3)]
        mean = w[0] * mean_in + w[1] * mean_ln + w[2] * mean_bn
        var = wp[0] * var_in + wp[1] * var_ln + wp[2] * var_bn
        xhat = (x - mean) / sqrt(var + self.eps)
        return gamma * xhat + beta


class Identity:
    def __call__(self, x, training=False, detach=False):
        return x


class SqueezeExcite:
    """Channel gate: global pool -> bottleneck MLP -> sigmoid scale per channel."""

    def __init__(self, register, prefix, c, reduction):
        if c < reduction:
            raise ConfigError(f"SE reduction {reduction} exceeds channel count {c}")
        if c % reduction:
            raise ConfigError(f"channel count {c} not divisible by SE reduction {reduction}")
        cr = c // reduction
        self.fc1 = Conv(register, f"{prefix}.fc1", c, cr, k=1)
        self.fc2 = Conv(register, f"{prefix}.fc2", cr, c, k=1)

    def __call__(self, x, detach=False):
        s = avgpool_global(x)
        s = relu(self.fc1(s, detach=detach))
        s = sigmoid(self.fc2(s, detach=detach))
        return x * s


def _make_norm(register, register_buffer, prefix, c, kind):
    if kind == "switchable":
        return SwitchNorm(register, register_buffer, prefix, c)
    if kind == "batch":
        return BatchNorm(register, register_buffer, prefix, c)
    if kind == "none":
        return Identity()
    raise ConfigError(f"unknown norm kind {kind!r}")


class ConvBlock:
    """Two conv3x3 -> norm -> relu layers, optionally followed by an SE gate."""

    def __init__(self, register, register_buffer, prefix, cin, cout, norm_kind,
                 use_se, se_reduction):
        bias = norm_kind == "none"
        self.conv1 = Conv(register, f"{prefix}.conv1", cin, cout, bias=bias)
        self.norm1 = _make_norm(register, register_buffer, f"{prefix}.norm1", cout, norm_kind)
        self.conv2 = Conv(register, f"{prefix}.conv2", cout, cout, bias=bias)
        self.norm2 = _make_norm(register, register_buffer, f"{prefix}.norm2", cout, norm_kind)
        self.se = (SqueezeExcite(register, f"{prefix}.se", cout, se_reduction)
                   if use_se else None)

    def __call__(self, x, training, detach=False):
        h = relu(self.norm1(self.conv1(x, detach=detach), training, detach=detach))
        h = relu(self.norm2(self.conv2(h, detach=detach), training, detach=detach))
        if self.se is not None:
            h = self.se(h, detach=detach)
        return h


@dataclass
class UNetSpec:
    in_channels: int
    out_channels: int
    base_channels: int
    depth: int
    use_se: bool = False
    norm_kind: str = "batch"           # switchable | batch | none
    final_activation: str = "none"     # sigmoid | none
    se_reduction: int = 4

    def validate(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.norm_kind not in ("switchable", "batch", "none"):
            raise ConfigError(f"unknown norm kind {self.norm_kind!r}")
        if self.final_activation not in ("sigmoid", "none"):
            raise ConfigError(f"unknown final activation {self.final_activation!r}")


class UNet:
    """Encoder-decoder with skip connections; spatial shape is preserved.

    Encoder stage i runs a ConvBlock at base*2^(i-1) channels then halves the
    spatial extent; the decoder mirrors it with nearest-neighbor upsampling and
    channel concatenation of the matching encoder output. A 1x1 head maps to
    ``out_channels``.
    """

    def __init__(self, spec: UNetSpec, image_size=None):
        spec.validate()
        if image_size is not None and image_size % (1 << spec.depth):
            raise GeometryError(
                f"image size {image_size} not divisible by 2^depth={1 << spec.depth}")
        self.spec = spec
        self.params = OrderedDict()
        self.buffers = OrderedDict()
        self.training = True

        reg, regb = self._register, self._register_buffer
        chans = [spec.base_channels * (1 << i) for i in range(spec.depth + 1)]
        self.enc = []
        cin = spec.in_channels
        for i, c in enumerate(chans[:-1], start=1):
            self.enc.append(ConvBlock(reg, regb, f"enc{i}", cin, c, spec.norm_kind,
                                      spec.use_se, spec.se_reduction))
            cin = c
        self.bottleneck = ConvBlock(reg, regb, "bottleneck", cin, chans[-1],
                                    spec.norm_kind, spec.use_se, spec.se_reduction)
        self.dec = []
        up_c = chans[-1]
        for i in range(spec.depth, 0, -1):
            skip_c = chans[i - 1]
            self.dec.append(ConvBlock(reg, regb, f"dec{i}", up_c + skip_c, skip_c,
                                      spec.norm_kind, spec.use_se, spec.se_reduction))
            up_c = skip_c
        self.head = Conv(reg, "head", up_c, spec.out_channels, k=1)

    def _register(self, name, array):
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name!r}")
        t = Tensor(array, requires_grad=True)
        self.params[name] = t
        return t

    def _register_buffer(self, name, array):
        if name in self.buffers:
            raise ConfigError(f"duplicate buffer {name!r}")
        arr = np.asarray(array, dtype=np.float64)
        self.buffers[name] = arr
        return arr

    def _check_input(self, x):
        if x.data.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise GeometryError(
                f"expected [N,{self.spec.in_channels},H,W] input, got {x.shape}")
        n, c, h, w = x.shape
        d = 1 << self.spec.depth
        if h % d or w % d:
            raise GeometryError(f"spatial extent {h}x{w} not divisible by 2^depth={d}")

    def __call__(self, x, training=None):
        training = self.training if training is None else training
        self._check_input(x)
        skips = []
        h = x
        for block in self.enc:
            h = block(h, training)
            skips.append(h)
            h = maxpool2(h)
        h = self.bottleneck(h, training)
        for block, skip in zip(self.dec, reversed(skips)):
            h = upsample_nearest2(h)
            h = concat_channels(h, skip)
            h = block(h, training)
        h = self.head(h)
        if self.spec.final_activation == "sigmoid":
            h = sigmoid(h)
        return h

    def encoder_features(self, x, n_stages=2, detach_params=True):
        """Activations of the first ``n_stages`` encoder blocks (pre-pooling).

        Runs in inference mode so feature extraction never perturbs running
        statistics; with ``detach_params`` the parameters receive no gradient
        while the input still does.
        """
        self._check_input(x)
        feats = []
        h = x
        for block in self.enc[:n_stages]:
            h = block(h, training=False, detach=detach_params)
            feats.append(h)
            h = maxpool2(h)
        return feats

    def parameters(self):
        return self.params.items()

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def parameter_count(self):
        return sum(t.size for t in self.params.values())


def xavier_init(net: UNet, seed: int):
    """Xavier-uniform conv/FC weights, zero biases, identity norm parameters.

    Deterministic under ``seed``: weights are drawn in registration order.
    """
    rng = np.random.default_rng(seed)
    for name, t in net.parameters():
        if name.endswith(".w"):
            k, c, kh, kw = t.shape
            fan_in, fan_out = c * kh * kw, k * kh * kw
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            t.data[...] = rng.uniform(-limit, limit, size=t.shape)
        elif name.endswith((".b", ".beta")):
            t.data[...] = 0.0
        elif name.endswith(".gamma"):
            t.data[...] = 1.0
        elif name.endswith((".lam_mean", ".lam_var")):
            t.data[...] = 1.0
        else:
            raise ConfigError(f"parameter {name!r} has no initialization rule")


def xavier_limit(fan_in, fan_out):
    return np.sqrt(6.0 / (fan_in + fan_out))


def clone_network(net: UNet) -> UNet:
    """Independent copy with identical parameter and buffer values."""
    import dataclasses

    out = UNet(dataclasses.replace(net.spec))
    for name, t in out.parameters():
        t.data[...] = net.params[name].data
    for name, arr in out.buffers.items():
        arr[...] = net.buffers[name]
    out.training = net.training
    return out


# Presets. The segmentor follows the attention design (SE + switchable norm);
# extractor and generator are plain UNets with batch norm. The extractor uses
# half the segmentor's base channels.
_PRESETS = {
    "desk": dict(ext_base=4, base=8, ext_depth=3, depth=3, se_reduction=4),
    "paper": dict(ext_base=8, base=16, ext_depth=3, depth=4, se_reduction=16),
}


def extractor_spec(scale="desk", in_channels=6):
    p = _PRESETS[scale]
    return UNetSpec(in_channels=in_channels, out_channels=1,
                    base_channels=p["ext_base"], depth=p["ext_depth"],
                    use_se=False, norm_kind="batch", final_activation="none")


def generator_spec(scale="desk", in_channels=7):
    p = _PRESETS[scale]
    return UNetSpec(in_channels=in_channels, out_channels=1,
                    base_channels=p["base"], depth=p["depth"],
                    use_se=False, norm_kind="batch", final_activation="sigmoid")


def segmentor_spec(scale="desk", in_channels=1):
    p = _PRESETS[scale]
    return UNetSpec(in_channels=in_channels, out_channels=2,
                    base_channels=p["base"], depth=p["depth"],
                    use_se=True, norm_kind="switchable", final_activation="none",
                    se_reduction=p["se_reduction"])


def se_block(x, params: SqueezeExcite):
    """Functional alias for applying a squeeze-excite gate."""
    return params(x)
