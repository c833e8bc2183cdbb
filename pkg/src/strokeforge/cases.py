"""Case records and the on-disk dataset layout shared by all commands.

A dataset directory holds one subdirectory per case containing ``ctp.sfv``,
``cbf.sfv``, ``cbv.sfv``, ``mtt.sfv``, ``tmax.sfv``, optional ``dwi.sfv`` and
``mask.sfv``, plus ``manifest.json``. This is also the single adapter point
where a loader for real data would plug in.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .perfusion import CtpVolume
from .volumeio import read_volume, write_volume

MAP_NAMES = ("cbf", "cbv", "mtt", "tmax")


@dataclass
class PerfusionMaps:
    cbf: np.ndarray
    cbv: np.ndarray
    mtt: np.ndarray
    tmax: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.stack([self.cbf, self.cbv, self.mtt, self.tmax])


@dataclass
class CaseRecord:
    case_id: str
    ctp: CtpVolume
    maps: PerfusionMaps
    dwi: np.ndarray | None = None    # training cases only
    mask: np.ndarray | None = None

    def __post_init__(self):
        shape = self.ctp.frames.shape[1:]
        for name in MAP_NAMES:
            arr = getattr(self.maps, name)
            if arr.shape != shape:
                raise ValueError(f"{self.case_id}: {name} shape {arr.shape} != {shape}")
        for name in ("dwi", "mask"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != shape:
                raise ValueError(f"{self.case_id}: {name} shape {arr.shape} != {shape}")

    @property
    def spatial_shape(self):
        return self.ctp.frames.shape[1:]

    def has_truth(self):
        return self.dwi is not None and self.mask is not None


def write_case(case_dir, case: CaseRecord):
    os.makedirs(case_dir, exist_ok=True)
    write_volume(os.path.join(case_dir, "ctp.sfv"), case.ctp.frames)
    for name in MAP_NAMES:
        write_volume(os.path.join(case_dir, f"{name}.sfv"), getattr(case.maps, name))
    files = ["ctp.sfv"] + [f"{n}.sfv" for n in MAP_NAMES]
    if case.dwi is not None:
        write_volume(os.path.join(case_dir, "dwi.sfv"), case.dwi)
        files.append("dwi.sfv")
    if case.mask is not None:
        write_volume(os.path.join(case_dir, "mask.sfv"), case.mask)
        files.append("mask.sfv")
    manifest = {
        "case_id": case.case_id,
        "spatial_shape": list(case.spatial_shape),
        "n_frames": int(case.ctp.frames.shape[0]),
        "frame_interval": case.ctp.frame_interval,
        "files": files,
    }
    with open(os.path.join(case_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_case(case_dir) -> CaseRecord:
    with open(os.path.join(case_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    frames, _ = read_volume(os.path.join(case_dir, "ctp.sfv"))
    maps = PerfusionMaps(*(read_volume(os.path.join(case_dir, f"{n}.sfv"))[0]
                           for n in MAP_NAMES))
    dwi = mask = None
    if os.path.exists(os.path.join(case_dir, "dwi.sfv")):
        dwi, _ = read_volume(os.path.join(case_dir, "dwi.sfv"))
    if os.path.exists(os.path.join(case_dir, "mask.sfv")):
        mask, _ = read_volume(os.path.join(case_dir, "mask.sfv"))
    ctp = CtpVolume(frames, frame_interval=manifest.get("frame_interval", 1.0))
    return CaseRecord(manifest["case_id"], ctp, maps, dwi, mask)


def list_case_dirs(root):
    dirs = [os.path.join(root, d) for d in sorted(os.listdir(root))
            if os.path.isfile(os.path.join(root, d, "manifest.json"))]
    if not dirs:
        raise FileNotFoundError(f"no case directories under {root}")
    return dirs


def load_dataset(root) -> list[CaseRecord]:
    return [load_case(d) for d in list_case_dirs(root)]


def dataset_checksum(root) -> str:
    """SHA-256 over every case file's path and content (order-stable)."""
    digest = hashlib.sha256()
    for case_dir in list_case_dirs(root):
        for name in sorted(os.listdir(case_dir)):
            path = os.path.join(case_dir, name)
            digest.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()
