"""The three training losses: extractor L1, generator weighted-L2 plus
feature-space distance, and the pixel-region loss (heatmap-weighted cross
entropy minus log generalized dice) for the segmentor.

All reductions are means so the loss weights keep the same meaning at any
resolution. Inputs may be Tensors or plain arrays; targets and weight maps
are treated as constants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (ShapeError, Tensor, absval, clip, log, sqrt, square,
                       tmean, tsum)

GD_EPS = 1e-5
PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    alpha: float = 1.0    # extractor L1 scale
    beta: float = 0.002   # generator image term
    gamma: float = 1.2    # generator feature term
    delta: float = 1.0    # pixel-region loss scale

    def validate(self):
        if min(self.alpha, self.beta, self.gamma, self.delta) < 0:
            raise ValueError(f"loss weights must be >= 0, got {self}")


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def extractor_loss(p, y, alpha=1.0):
    """Mean absolute difference between probability map and binary target."""
    p, y = _as_tensor(p), _as_tensor(y).detach()
    _check_same_shape(p, y, "extractor_loss")
    return alpha * tmean(absval(p - y))


def generator_loss(dwi_g, dwi_o, weight_map, feat_fn=None, beta=0.002, gamma=1.2,
                   image_distance="squared"):
    """Heatmap-weighted image distance plus feature-space distance.

    ``feat_fn`` maps an image tensor to a list of feature tensors; it must
    already stop gradients through its own parameters. Gradients flow to
    ``dwi_g`` only; the target image and its features are constants.
    ``image_distance`` is the mean of weighted squared differences by default,
    or its square root with ``"root"``.
    """
    dwi_g = _as_tensor(dwi_g)
    dwi_o = _as_tensor(dwi_o).detach()
    w = _as_tensor(weight_map).detach()
    _check_same_shape(dwi_g, dwi_o, "generator_loss")

    img = tmean(w * square(dwi_g - dwi_o))
    if image_distance == "root":
        img = sqrt(img + 1e-12)
    elif image_distance != "squared":
        raise ValueError(f"unknown image distance {image_distance!r}")
    total = beta * img

    if gamma != 0.0 and feat_fn is not None:
        feats_g = feat_fn(dwi_g)
        feats_o = [f.detach() for f in feat_fn(dwi_o)]
        sq = None
        count = 0
        for fg, fo in zip(feats_g, feats_o):
            term = tsum(square(fg - fo))
            sq = term if sq is None else sq + term
            count += fg.size
        total = total + gamma * (sq / count)
    return total


def generalized_dice(p, y, eps=GD_EPS):
    """Class-rebalanced dice in (0, 1]: per-class weights are the inverse
    squared class volumes, so tiny foregrounds count as much as background."""
    p, y = _as_tensor(p), _as_tensor(y).detach()
    _check_same_shape(p, y, "generalized_dice")
    axes = (0, 2, 3) if p.data.ndim == 4 else tuple(range(1, p.data.ndim))
    inter = tsum(p * y, axes)
    psum = tsum(p, axes)
    ysum = tsum(y, axes)
    w = 1.0 / square(ysum + eps)
    num = tsum(w * inter)
    den = tsum(w * (psum + ysum)) + eps
    return 2.0 * num / den


def weighted_ce(p, y, weight_map):
    """Mean over pixels of the weight times pixel-wise cross entropy."""
    p, y = _as_tensor(p), _as_tensor(y).detach()
    w = _as_tensor(weight_map).detach()
    _check_same_shape(p, y, "weighted_ce")
    pc = clip(p, PROB_FLOOR, 1.0)
    ce = -tsum(y * log(pc), axes=1, keepdims=True)   # [N,1,H,W]
    if w.data.ndim == ce.data.ndim - 1:
        w = Tensor(w.data[:, None])
    return tmean(w * ce)


def pr_loss(p, y, weight_map, delta=1.0, eps=GD_EPS):
    """Pixel-region loss: weighted CE minus log generalized dice.

    The CE term supplies per-pixel gradient even with zero foreground overlap,
    where the dice term alone stalls; the log balances the two magnitudes.
    """
    gd = generalized_dice(p, y, eps)
    gd = clip(gd, 1e-300, 1.0)   # guard: GD > 0 by construction
    return delta * (weighted_ce(p, y, weight_map) - log(gd))
