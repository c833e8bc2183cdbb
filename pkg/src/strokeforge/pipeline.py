"""End-to-end assembly and training of extractor -> generator -> segmentor:
input preparation, joint loss, RMSprop with warm-up and step decay,
cross-validation, inference and bit-exact checkpointing.

Ablation variants share this code path: ``full`` runs all three networks,
``gen`` drops the extractor (generator sees perfusion maps only), and
``segonly`` segments the perfusion maps directly with plain cross entropy.
"""
from __future__ import annotations

import dataclasses
import logging
import os
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import geometry, perfusion
from .autodiff import (Tensor, concat, no_grad, reshape, sigmoid, softmax,
                       sqrt, square, tmean)
from .cases import CaseRecord, PerfusionMaps
from .layers import UNet, extractor_spec, generator_spec, segmentor_spec, xavier_init
from .losses import LossWeights, extractor_loss, generator_loss, pr_loss, weighted_ce
from .volumeio import read_archive, write_archive

log = logging.getLogger(__name__)

VARIANTS = ("full", "gen", "segonly")


@dataclass
class TrainConfig:
    loss_weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 5
    base_lr: float = 0.002
    lr_decay_factor: float = 0.2
    lr_decay_epochs: tuple = (180, 300)
    warmup_epochs: int = 5
    total_epochs: int = 360
    seed: int = 0
    rmsprop_rho: float = 0.9
    rmsprop_eps: float = 1e-8
    folds: int = 4
    image_size: int = 256
    variant: str = "full"
    detach_stages: bool = False
    heatmap_w0: float = 4.0
    heatmap_sigma: float = 10.0
    heatmap_mode: str = "boundary"
    generator_image_distance: str = "squared"
    generator_extra_channel: str = "ctp_mean"   # ctp_mean | none
    fold_workers: int = 1
    unet_depth: int = 0     # 0 keeps the preset depth
    unet_base: int = 0      # 0 keeps the preset base channels (extractor: half)

    @classmethod
    def desk(cls, **overrides):
        """64x64 preset: everything else stays at paper values, with decay
        milestones rescaled to the shorter epoch count."""
        base = dict(image_size=64, total_epochs=30, lr_decay_epochs=(15, 25),
                    heatmap_sigma=geometry.DESK_SIGMA)
        base.update(overrides)
        return cls(**base)

    @property
    def scale(self):
        return "desk" if self.image_size <= 128 else "paper"

    def validate(self):
        self.loss_weights.validate()
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.batch_size < 1 or self.folds < 1 or self.total_epochs < 0:
            raise ValueError("batch_size/folds/total_epochs out of range")
        if self.generator_extra_channel not in ("ctp_mean", "none"):
            raise ValueError(f"unknown extra channel {self.generator_extra_channel!r}")


# -- schedule and optimizer ---------------------------------------------------

def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 10% of base, then step decay at the milestones."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.base_lr * (0.1 + 0.9 * epoch / cfg.warmup_epochs)
    passed = sum(1 for m in cfg.lr_decay_epochs if epoch >= m)
    return cfg.base_lr * cfg.lr_decay_factor ** passed


def rmsprop_step(params, grads, buffers, lr, rho, eps):
    """In-place RMSprop update over aligned lists of arrays."""
    for p, g, s in zip(params, grads, buffers):
        s *= rho
        s += (1.0 - rho) * g * g
        p -= lr * g / (np.sqrt(s) + eps)


class RmsProp:
    def __init__(self, named_params, rho=0.9, eps=1e-8):
        self.named = list(named_params)
        self.rho, self.eps = rho, eps
        self.buffers = OrderedDict((n, np.zeros_like(t.data)) for n, t in self.named)

    def step(self, lr):
        ps, gs, bs = [], [], []
        for name, t in self.named:
            if t.grad is None:
                continue
            ps.append(t.data)
            gs.append(t.grad)
            bs.append(self.buffers[name])
        rmsprop_step(ps, gs, bs, lr, self.rho, self.eps)

    def zero_grad(self):
        for _, t in self.named:
            t.zero_grad()


def dice_score(pred, truth) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks count as a perfect match."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    total = pred.sum() + truth.sum()
    if total == 0:
        return 1.0
    return 2.0 * np.logical_and(pred, truth).sum() / total


# -- per-case preparation -----------------------------------------------------

def _zscore(arr, eps=1e-8):
    return (arr - arr.mean()) / (arr.std() + eps)


def _minmax01(arr, eps=1e-12):
    lo, hi = arr.min(), arr.max()
    return (arr - lo) / (hi - lo + eps)


@dataclass
class PreparedCase:
    """Constant (non-differentiable) per-case inputs, computed once."""
    case_id: str
    frames6: np.ndarray           # [6,H,W] sampled CTP stack, case-normalized
    maps4: np.ndarray             # [4,H,W] z-scored CBF/CBV/MTT/Tmax
    ctp_mean: np.ndarray          # [1,H,W] z-scored temporal mean frame
    dwi01: np.ndarray | None      # [1,H,W] min-max scaled target
    mask: np.ndarray | None       # [H,W] binary
    onehot: np.ndarray | None     # [2,H,W] (background, infarct)
    weight: np.ndarray | None     # [1,H,W] heatmap W
    detection_fallback: bool


def prepare_case(case: CaseRecord, cfg: TrainConfig) -> PreparedCase:
    h, w = case.spatial_shape
    if (h, w) != (cfg.image_size, cfg.image_size):
        raise ValueError(f"{case.case_id}: spatial shape {(h, w)} != config "
                         f"image_size {cfg.image_size}")
    tdc = perfusion.analyze_volume(case.ctp)
    if tdc.fallback:
        log.warning("%s: enhancement detection failed, sampling full frame range",
                    case.case_id)
    frames6 = perfusion.normalize_stack(
        perfusion.sample_frames(case.ctp, tdc.onset_idx, tdc.end_idx))
    maps4 = np.stack([_zscore(m) for m in case.maps.stacked()])
    ctp_mean = _zscore(case.ctp.frames.mean(axis=0))[None]
    dwi01 = onehot = weight = mask = None
    if case.mask is not None:
        mask = (np.asarray(case.mask) > 0.5).astype(np.float64)
        onehot = np.stack([1.0 - mask, mask])
        weight = geometry.heatmap_for_mask(
            mask, cfg.heatmap_w0, cfg.heatmap_sigma, cfg.heatmap_mode)[None]
    if case.dwi is not None:
        dwi01 = _minmax01(case.dwi)[None]
    return PreparedCase(case.case_id, frames6, maps4, ctp_mean, dwi01, mask,
                        onehot, weight, tdc.fallback)


GENERATOR_CHANNELS = ("map_pre", "map_prob", "cbf", "cbv", "mtt", "tmax", "ctp_mean")


def assemble_generator_input(map_pre, map_prob, maps, ctp_mean):
    """Stack one case's generator input [7,H,W] in the documented channel
    order ``GENERATOR_CHANNELS``.

    Inputs are [H,W] and must already be normalized per case; the extractor
    maps may be graph tensors, in which case gradients flow through the stack.
    """
    if isinstance(maps, PerfusionMaps):
        map_list = [maps.cbf, maps.cbv, maps.mtt, maps.tmax]
    else:
        map_list = list(maps)
    parts = [map_pre, map_prob, *map_list, ctp_mean]
    lifted = [p if isinstance(p, Tensor) else Tensor(p) for p in parts]
    shape = lifted[0].shape
    for i, p in enumerate(lifted):
        if p.data.ndim != 2 or p.shape != shape:
            raise ValueError(
                f"channel {GENERATOR_CHANNELS[i]} has shape {p.shape}, expected {shape}")
    return concat([reshape(p, (1, *shape)) for p in lifted], axis=0)


def _zscore_graph(x, eps=1e-6):
    """Per-sample zero-mean unit-variance over spatial axes, differentiable."""
    mu = tmean(x, (2, 3), keepdims=True)
    var = tmean(square(x), (2, 3), keepdims=True) - square(mu)
    return (x - mu) / sqrt(var + eps)


# -- pipeline state -----------------------------------------------------------

class PipelineState:
    """Networks, optimizer buffers, epoch counter and shuffling RNG for one
    training run (one fold)."""

    def __init__(self, cfg: TrainConfig, run_seed=None):
        cfg.validate()
        self.cfg = cfg
        self.epoch = 0
        seed = cfg.seed if run_seed is None else run_seed
        ss = np.random.SeedSequence(seed).spawn(4)
        self.rng = np.random.default_rng(ss[3])
        scale = cfg.scale

        def sized(spec, halve_base=False):
            if cfg.unet_depth:
                spec.depth = cfg.unet_depth
            if cfg.unet_base:
                spec.base_channels = max(1, cfg.unet_base // 2) if halve_base \
                    else cfg.unet_base
            return spec

        extra = 1 if cfg.generator_extra_channel == "ctp_mean" else 0
        self.nets = OrderedDict()
        if cfg.variant == "full":
            self.nets["extractor"] = UNet(sized(extractor_spec(scale), True),
                                          cfg.image_size)
            gen_in = 6 + extra
        elif cfg.variant == "gen":
            gen_in = 4 + extra
        if cfg.variant in ("full", "gen"):
            self.nets["generator"] = UNet(
                sized(generator_spec(scale, in_channels=gen_in)), cfg.image_size)
            seg_in = 1
        else:
            seg_in = 4
        self.nets["segmentor"] = UNet(
            sized(segmentor_spec(scale, in_channels=seg_in)), cfg.image_size)
        for net, child in zip(("extractor", "generator", "segmentor"), ss[:3]):
            if net in self.nets:
                xavier_init(self.nets[net], int(child.generate_state(1)[0]))
        self.optimizer = RmsProp(self._named_params(), cfg.rmsprop_rho, cfg.rmsprop_eps)
        # supplies the generator loss's feature space; parameters are never
        # trained through that loss (they are detached inside encoder_features)
        self.feature_net = self.nets["segmentor"]

    def _named_params(self):
        for net_name, net in self.nets.items():
            for pname, t in net.parameters():
                yield f"{net_name}.{pname}", t

    def set_training(self, training: bool):
        for net in self.nets.values():
            net.training = training

    def zero_grad(self):
        self.optimizer.zero_grad()

    # -- forward --------------------------------------------------------

    def forward_batch(self, batch: list[PreparedCase], training: bool):
        """Run the variant's network chain on a batch of prepared cases.

        Returns a dict with (present keys depend on variant): ``map_pre``,
        ``map_prob`` [N,1,H,W], ``dwi_g`` [N,1,H,W], ``seg_prob`` [N,2,H,W].
        """
        cfg = self.cfg
        self.set_training(training)
        maps4 = np.stack([pc.maps4 for pc in batch])
        ctp_mean = np.stack([pc.ctp_mean for pc in batch])
        out = {}

        if cfg.variant == "full":
            frames = Tensor(np.stack([pc.frames6 for pc in batch]))
            map_pre = self.nets["extractor"](frames, training)
            map_prob = sigmoid(map_pre)
            out["map_pre"], out["map_prob"] = map_pre, map_prob
            if cfg.detach_stages:
                map_pre, map_prob = map_pre.detach(), map_prob.detach()
            parts = [_zscore_graph(map_pre), _zscore_graph(map_prob), Tensor(maps4)]
        elif cfg.variant == "gen":
            parts = [Tensor(maps4)]
        else:
            seg_in = Tensor(maps4)
            logits = self.nets["segmentor"](seg_in, training)
            out["seg_prob"] = softmax(logits, axis=1)
            return out

        if cfg.generator_extra_channel == "ctp_mean":
            parts.append(Tensor(ctp_mean))
        gen_in = concat(parts, axis=1) if len(parts) > 1 else parts[0]
        dwi_g = self.nets["generator"](gen_in, training)
        out["dwi_g"] = dwi_g
        seg_in = dwi_g.detach() if cfg.detach_stages else dwi_g
        logits = self.nets["segmentor"](seg_in, training)
        out["seg_prob"] = softmax(logits, axis=1)
        return out

    def total_loss(self, outputs, batch: list[PreparedCase]):
        """Sum of the per-stage losses present in this variant."""
        cfg = self.cfg
        w = cfg.loss_weights
        for pc in batch:
            if pc.onehot is None or (cfg.variant != "segonly" and pc.dwi01 is None):
                raise ValueError(f"{pc.case_id}: training requires dwi and mask")
        onehot = np.stack([pc.onehot for pc in batch])
        weight = np.stack([pc.weight for pc in batch])
        mask = np.stack([pc.mask for pc in batch])[:, None]

        components = {}
        if cfg.variant == "segonly":
            # paper-style baseline: plain unweighted cross entropy
            components["segmentor"] = w.delta * weighted_ce(
                outputs["seg_prob"], onehot, np.ones_like(weight))
        else:
            dwi = np.stack([pc.dwi01 for pc in batch])
            if cfg.variant == "full":
                components["extractor"] = extractor_loss(
                    outputs["map_prob"], mask, w.alpha)
            feat = self.feature_net.encoder_features
            components["generator"] = generator_loss(
                outputs["dwi_g"], Tensor(dwi), weight, feat, w.beta, w.gamma,
                cfg.generator_image_distance)
            components["segmentor"] = pr_loss(
                outputs["seg_prob"], onehot, weight, w.delta)
        total = None
        for part in components.values():
            total = part if total is None else total + part
        return total, {k: float(v.data) for k, v in components.items()}

    # -- training and inference ------------------------------------------

    def run_epoch(self, prepared: list[PreparedCase]):
        """One pass over the training cases; returns the epoch's mean losses."""
        cfg = self.cfg
        lr = lr_schedule(self.epoch, cfg)
        order = self.rng.permutation(len(prepared))
        sums, count = {}, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [prepared[i] for i in order[start:start + cfg.batch_size]]
            outputs = self.forward_batch(batch, training=True)
            loss, components = self.total_loss(outputs, batch)
            self.zero_grad()
            loss.backward()
            self.optimizer.step(lr)
            n = len(batch)
            count += n
            sums["total"] = sums.get("total", 0.0) + float(loss.data) * n
            for key, val in components.items():
                sums[key] = sums.get(key, 0.0) + val * n
        self.epoch += 1
        return {k: v / count for k, v in sums.items()} | {"lr": lr}

    def infer_case(self, pc: PreparedCase, threshold=0.5):
        """Binary mask, foreground probability and generated image (if any)."""
        with no_grad():
            outputs = self.forward_batch([pc], training=False)
        seg_prob = outputs["seg_prob"].data[0]
        pred = (seg_prob[1] > threshold).astype(np.float64)
        dwi_g = outputs["dwi_g"].data[0, 0] if "dwi_g" in outputs else None
        return pred, seg_prob, dwi_g

    def evaluate(self, prepared: list[PreparedCase]):
        """Per-case Dice against ground truth."""
        scores = {}
        for pc in prepared:
            if pc.mask is None:
                raise ValueError(f"{pc.case_id}: no ground truth to evaluate")
            pred, _, _ = self.infer_case(pc)
            scores[pc.case_id] = dice_score(pred, pc.mask)
        return scores

    # -- persistence -------------------------------------------------------

    def save(self, path):
        arrays = OrderedDict()
        for name, t in self._named_params():
            arrays[f"param.{name}"] = t.data
        for net_name, net in self.nets.items():
            for bname, arr in net.buffers.items():
                arrays[f"buffer.{net_name}.{bname}"] = arr
        for name, arr in self.optimizer.buffers.items():
            arrays[f"opt.{name}"] = arr
        meta = {
            "epoch": self.epoch,
            "variant": self.cfg.variant,
            "image_size": self.cfg.image_size,
            "rng_state": self.rng.bit_generator.state,
            "config": config_to_dict(self.cfg),
        }
        write_archive(path, arrays, meta)

    @classmethod
    def load(cls, path, cfg: TrainConfig | None = None):
        meta, arrays = read_archive(path)
        if cfg is None:
            cfg = config_from_dict(meta["config"])
        state = cls(cfg)
        state.epoch = int(meta["epoch"])
        state.rng.bit_generator.state = meta["rng_state"]
        for name, t in state._named_params():
            t.data[...] = arrays[f"param.{name}"]
        for net_name, net in state.nets.items():
            for bname, arr in net.buffers.items():
                arr[...] = arrays[f"buffer.{net_name}.{bname}"]
        for name, arr in state.optimizer.buffers.items():
            arr[...] = arrays[f"opt.{name}"]
        return state


def forward_pipeline(case: CaseRecord, state: PipelineState):
    """Single-case forward pass: (map_pre, map_prob, dwi_g, seg_prob) data
    arrays; entries not produced by the variant are None."""
    pc = prepare_case(case, state.cfg)
    with no_grad():
        outputs = state.forward_batch([pc], training=False)

    def get(key):
        return outputs[key].data if key in outputs else None

    return get("map_pre"), get("map_prob"), get("dwi_g"), get("seg_prob")


def infer(case: CaseRecord, state: PipelineState, threshold=0.5):
    """Inference on a case that may lack dwi/mask."""
    pred, seg_prob, dwi_g = state.infer_case(prepare_case(case, state.cfg), threshold)
    return pred, seg_prob, dwi_g


# -- cross-validation ---------------------------------------------------------

def fold_assignments(case_ids, folds, seed):
    """Deterministic near-even partition of case ids into validation folds."""
    if len(case_ids) < folds:
        raise ValueError(f"{len(case_ids)} cases cannot fill {folds} folds")
    ids = sorted(case_ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    assign = {}
    for pos, idx in enumerate(perm):
        assign[ids[idx]] = pos % folds
    return assign


def fold_seed(cfg_seed, fold_index):
    return int(np.random.SeedSequence([cfg_seed, 1000 + fold_index])
               .generate_state(1)[0])


def train_fold(prepared_train, cfg, seed, epochs=None, state=None, loss_rows=None):
    """Train a fresh (or resumed) pipeline for ``epochs`` epochs."""
    state = state or PipelineState(cfg, run_seed=seed)
    loss_rows = loss_rows if loss_rows is not None else []
    target = cfg.total_epochs if epochs is None else state.epoch + epochs
    while state.epoch < target:
        stats = state.run_epoch(prepared_train)
        loss_rows.append({"epoch": state.epoch - 1} | stats)
    return state, loss_rows


def _run_single_fold(args):
    cfg, fold_idx, train_cases, val_cases = args
    prepared_train = [prepare_case(c, cfg) for c in train_cases]
    prepared_val = [prepare_case(c, cfg) for c in val_cases]
    state, loss_rows = train_fold(prepared_train, cfg, fold_seed(cfg.seed, fold_idx))
    scores = state.evaluate(prepared_val)
    return fold_idx, loss_rows, scores, state


def cross_validate(dataset: list[CaseRecord], cfg: TrainConfig,
                   checkpoint_dir=None, keep_states=False):
    """Leave-one-subset-out cross-validation; returns the run report dict."""
    cfg.validate()
    t0 = time.time()
    assign = fold_assignments([c.case_id for c in dataset], cfg.folds, cfg.seed)
    jobs = []
    for fold in range(cfg.folds):
        train_cases = [c for c in dataset if assign[c.case_id] != fold]
        val_cases = [c for c in dataset if assign[c.case_id] == fold]
        jobs.append((cfg, fold, train_cases, val_cases))

    if cfg.fold_workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=cfg.fold_workers) as pool:
            results = list(pool.map(_run_single_fold, jobs))
    else:
        results = [_run_single_fold(job) for job in jobs]

    folds_out, loss_table, states = [], [], {}
    for fold_idx, loss_rows, scores, state in sorted(results, key=lambda r: r[0]):
        folds_out.append({
            "fold": fold_idx,
            "val_cases": sorted(scores),
            "dice_per_case": {k: scores[k] for k in sorted(scores)},
            "dice_mean": float(np.mean(list(scores.values()))),
        })
        for row in loss_rows:
            loss_table.append({"fold": fold_idx} | row)
        if checkpoint_dir is not None:
            os.makedirs(checkpoint_dir, exist_ok=True)
            state.save(os.path.join(checkpoint_dir, f"fold{fold_idx}.ckpt"))
        if keep_states:
            states[fold_idx] = state
    report = {
        "config": config_to_dict(cfg),
        "seed": cfg.seed,
        "folds": folds_out,
        "mean_dice": float(np.mean([f["dice_mean"] for f in folds_out])),
        "loss_table": loss_table,
        "wall_clock_sec": time.time() - t0,
    }
    if keep_states:
        report["states"] = states
    return report


# -- config (de)serialization -------------------------------------------------

def config_to_dict(cfg: TrainConfig) -> dict:
    out = dataclasses.asdict(cfg)
    weights = out.pop("loss_weights")
    out = weights | out
    out["lr_decay_epochs"] = list(cfg.lr_decay_epochs)
    return out


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    weights = LossWeights(**{k: d.pop(k) for k in ("alpha", "beta", "gamma", "delta")
                             if k in d})
    if "lr_decay_epochs" in d:
        d["lr_decay_epochs"] = tuple(d["lr_decay_epochs"])
    cfg = TrainConfig(loss_weights=weights, **d)
    cfg.validate()
    return cfg
