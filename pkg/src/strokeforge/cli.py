"""Command-line surface: phantom-gen, preprocess, train, infer, evaluate,
gradcheck and ablate.

Exit codes: 0 success, 1 validation error (bad flags, missing files, config
problems), 2 internal error. Flags are long-form only and mirror config keys,
so config files and flags never diverge. ``STROKEFORGE_SEED`` overrides the
configured training seed for CI smoke runs.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import checks, config as cfgmod, geometry, perfusion, pipeline
from .cases import dataset_checksum, list_case_dirs, load_case, load_dataset
from .phantom import PhantomSpec, PhantomSpecError, generate_dataset
from .pipeline import PipelineState, TrainConfig, dice_score
from .volumeio import VolumeFormatError, read_volume, write_volume


class UsageError(Exception):
    pass


_VALIDATION_ERRORS = (UsageError, cfgmod.ConfigError, PhantomSpecError,
                      VolumeFormatError, FileNotFoundError, NotADirectoryError,
                      ValueError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="strokeforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a synthetic phantom dataset")
    p.add_argument("--spec", required=True, help="phantom spec key-value file")
    p.add_argument("--out", required=True)

    p = sub.add_parser("preprocess", help="curve analysis and frame sampling per case")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="cross-validated end-to-end training")
    p.add_argument("--config", required=True, help="training config key-value file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_overrides(p)

    p = sub.add_parser("infer", help="predict a mask for one case")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--case", required=True, help="case directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="Dice of predicted vs truth masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--dump-heatmaps", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference check of all ops")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="run ablation variants and check ordering")
    p.add_argument("--variants", default="segonly,gen,full")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_overrides(p)
    return parser


_OVERRIDE_KEYS = sorted(set(pipeline.config_to_dict(TrainConfig())) - {"variant"})


def _add_config_overrides(p):
    for key in _OVERRIDE_KEYS:
        p.add_argument(f"--{key}", default=None, help=argparse.SUPPRESS)


def _collect_config(args) -> TrainConfig:
    overrides = {}
    for key in _OVERRIDE_KEYS:
        raw = getattr(args, key, None)
        if raw is None:
            continue
        parsed = cfgmod.parse_kv_text(f"{key} = {raw}")
        overrides.update(parsed)
    cfg = cfgmod.train_config_from_file(args.config, overrides)
    env_seed = os.environ.get("STROKEFORGE_SEED")
    if env_seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(env_seed))
    return cfg


# -- report helpers -----------------------------------------------------------

_LOSS_COLUMNS = ("fold", "epoch", "lr", "total", "extractor", "generator", "segmentor")


def write_loss_csv(path, loss_table):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_LOSS_COLUMNS)
        for row in loss_table:
            writer.writerow([row.get(col, "") for col in _LOSS_COLUMNS])


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _write_report(out_dir, report, cfg, data_dir):
    os.makedirs(out_dir, exist_ok=True)
    cfg_text = cfgmod.train_config_to_text(cfg)
    report = dict(report)
    loss_table = report.pop("loss_table", [])
    report.pop("states", None)
    report["checksums"] = {
        "data": dataset_checksum(data_dir),
        "config": _sha256_text(cfg_text),
    }
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_loss_csv(os.path.join(out_dir, "losses.csv"), loss_table)
    with open(os.path.join(out_dir, "config_echo.cfg"), "w") as fh:
        fh.write(cfg_text)
    return report


# -- overlays -----------------------------------------------------------------

def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of the mask with at least one 4-neighbor outside it."""
    m = np.asarray(mask) > 0.5
    interior = m.copy()
    interior[1:, :] &= m[:-1, :]
    interior[:-1, :] &= m[1:, :]
    interior[:, 1:] &= m[:, :-1]
    interior[:, :-1] &= m[:, 1:]
    return m & ~interior


def emit_overlay(base, mask_truth, mask_pred, path):
    """PNG of the grayscale base with truth contour green, prediction red.

    Where both contours meet, truth wins.
    """
    from PIL import Image

    base = np.asarray(base, dtype=np.float64)
    lo, hi = base.min(), base.max()
    gray = np.zeros_like(base) if hi == lo else (base - lo) / (hi - lo)
    rgb = np.repeat((gray * 255.0).astype(np.uint8)[:, :, None], 3, axis=2)
    if mask_pred is not None:
        edge = mask_boundary(mask_pred)
        rgb[edge] = (255, 0, 0)
    if mask_truth is not None:
        edge = mask_boundary(mask_truth)
        rgb[edge] = (0, 255, 0)
    Image.fromarray(rgb, mode="RGB").save(path)


# -- subcommands --------------------------------------------------------------

def _cmd_phantom_gen(args):
    spec = cfgmod.phantom_spec_from_file(args.spec)
    generate_dataset(spec, args.out)
    print(f"wrote {spec.n_cases} cases to {args.out}")
    return 0


def _cmd_preprocess(args):
    for case_dir in list_case_dirs(args.data):
        case = load_case(case_dir)
        tdc = perfusion.analyze_volume(case.ctp)
        stack = perfusion.sample_frames(case.ctp, tdc.onset_idx, tdc.end_idx)
        out_dir = os.path.join(args.out, case.case_id)
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "curve.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame_index", "raw", "smoothed"])
            for i, (raw, smooth) in enumerate(zip(tdc.values, tdc.smoothed)):
                writer.writerow([i, repr(float(raw)), repr(float(smooth))])
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump({"case_id": case.case_id, "onset_idx": tdc.onset_idx,
                       "peak_idx": tdc.peak_idx, "end_idx": tdc.end_idx,
                       "fallback": tdc.fallback}, fh, indent=1, sort_keys=True)
            fh.write("\n")
        write_volume(os.path.join(out_dir, "sampled.sfv"), stack)
    print(f"preprocessed {args.data} -> {args.out}")
    return 0


def _cmd_train(args):
    cfg = _collect_config(args)
    dataset = load_dataset(args.data)
    report = pipeline.cross_validate(
        dataset, cfg, checkpoint_dir=os.path.join(args.out, "checkpoints"))
    report = _write_report(args.out, report, cfg, args.data)
    print(f"mean dice {report['mean_dice']:.4f} over {cfg.folds} folds -> {args.out}")
    return 0


def _cmd_infer(args):
    state = PipelineState.load(args.checkpoint)
    case = load_case(args.case)
    pred, seg_prob, dwi_g = pipeline.infer(case, state)
    os.makedirs(args.out, exist_ok=True)
    out_dir = os.path.join(args.out, case.case_id)
    os.makedirs(out_dir, exist_ok=True)
    write_volume(os.path.join(out_dir, "mask_pred.sfv"), pred)
    write_volume(os.path.join(out_dir, "seg_prob.sfv"), seg_prob,
                 ["background", "infarct"])
    base = dwi_g if dwi_g is not None else case.maps.cbf
    if dwi_g is not None:
        write_volume(os.path.join(out_dir, "dwi_g.sfv"), dwi_g)
    emit_overlay(base, case.mask, pred, os.path.join(out_dir, "overlay.png"))
    print(f"wrote prediction for {case.case_id} to {out_dir}")
    return 0


def _find_pred_mask(pred_root, case_id):
    for name in ("mask_pred.sfv", "mask.sfv"):
        path = os.path.join(pred_root, case_id, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no prediction mask for {case_id} under {pred_root}")


def _cmd_evaluate(args):
    scores = {}
    for case_dir in sorted(os.listdir(args.truth)):
        truth_path = os.path.join(args.truth, case_dir, "mask.sfv")
        if not os.path.exists(truth_path):
            continue
        truth, _ = read_volume(truth_path)
        pred, _ = read_volume(_find_pred_mask(args.pred, case_dir))
        scores[case_dir] = dice_score(pred > 0.5, truth > 0.5)
        if args.dump_heatmaps and args.out:
            os.makedirs(os.path.join(args.out, case_dir), exist_ok=True)
            w = geometry.heatmap_for_mask((truth > 0.5).astype(np.float64))
            write_volume(os.path.join(args.out, case_dir, "heatmap_w.sfv"), w)
    if not scores:
        raise FileNotFoundError(f"no truth masks found under {args.truth}")
    report = {"per_case": scores, "mean_dice": float(np.mean(list(scores.values())))}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "evaluate_report.json"), "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
            fh.write("\n")
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def _cmd_gradcheck(args):
    results = checks.run_all(args.seed)
    failed = 0
    for name, err, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:32s} rel_err={err:.3e}")
        failed += 0 if ok else 1
    print(f"{len(results) - failed}/{len(results)} gradient checks passed "
          f"(tolerance {checks.TOLERANCE:g})")
    return 0 if failed == 0 else 1


def _cmd_ablate(args):
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = set(variants) - set(pipeline.VARIANTS)
    if unknown:
        raise UsageError(f"unknown variant(s): {', '.join(sorted(unknown))}")
    cfg = _collect_config(args)
    dataset = load_dataset(args.data)
    mean_dice = {}
    for variant in variants:
        vcfg = dataclasses.replace(cfg, variant=variant)
        report = pipeline.cross_validate(dataset, vcfg)
        report = _write_report(os.path.join(args.out, variant), report, vcfg, args.data)
        mean_dice[variant] = report["mean_dice"]
        print(f"variant {variant}: mean dice {report['mean_dice']:.4f}")
    summary = {"mean_dice": mean_dice, "seed": cfg.seed}
    ladder = [v for v in ("segonly", "gen", "full") if v in mean_dice]
    if len(ladder) >= 2:
        ordered = all(mean_dice[a] <= mean_dice[b]
                      for a, b in zip(ladder, ladder[1:]))
        summary["ordering"] = " <= ".join(ladder)
        summary["ordering_ok"] = bool(ordered)
        if not ordered:
            summary["ordering_violation"] = True
            print("WARNING: ablation ordering violated")
    if "full" in mean_dice and "segonly" in mean_dice:
        summary["full_minus_segonly"] = mean_dice["full"] - mean_dice["segonly"]
    with open(os.path.join(args.out, "ablation_report.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return 0


_COMMANDS = {
    "phantom-gen": _cmd_phantom_gen,
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "evaluate": _cmd_evaluate,
    "gradcheck": _cmd_gradcheck,
    "ablate": _cmd_ablate,
}


def run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:   # internal error
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
