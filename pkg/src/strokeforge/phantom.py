"""Synthetic perfusion phantoms: a brain ellipse with a disk infarct core and
a surrounding penumbra-like annulus.

Modality relationships follow the clinical picture: the core shows strongly
attenuated and delayed contrast enhancement, markedly reduced CBF/CBV,
prolonged MTT/Tmax and a hyperintense DWI region; the penumbra shares the
timing changes with much milder flow reduction and no DWI change, so flow
maps alone cannot separate the two. Generation is a pure function of
(seed, case_index).
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from .cases import CaseRecord, PerfusionMaps, write_case
from .perfusion import CtpVolume


class PhantomSpecError(ValueError):
    pass


@dataclass
class PhantomSpec:
    n_cases: int = 40
    image_size: int = 64
    n_frames: int = 24
    lesion_radius_range: tuple = (4, 9)
    contrast_curve_params: tuple = (4, 9, 60.0)   # onset frame, peak frame, peak height
    noise_sigma: float = 0.05
    seed: int = 11
    # lesion effect sizes (relative to normal tissue) and nuisance structure
    core_flow_factor: float = 0.4    # CBF and CBV multiplier inside the core
    core_time_factor: float = 2.0    # MTT and Tmax multiplier inside the core
    dwi_lesion_contrast: float = 0.5
    with_penumbra: bool = True
    texture_amp: float = 0.15
    # perfusion maps are deliberately the noisiest modality (they stand in for
    # deconvolution estimates); the dynamic frames carry cleaner signal
    map_noise_mult: float = 8.0
    # core-mimicking artifacts that exist only in the maps (deconvolution
    # artifacts): normal DWI, near-normal enhancement timing
    n_map_artifacts: int = 2

    def validate(self):
        if self.n_frames < 8:
            raise PhantomSpecError(f"need >= 8 frames, got {self.n_frames}")
        if self.n_cases < 1:
            raise PhantomSpecError("n_cases must be positive")
        lo, hi = self.lesion_radius_range
        if not (0 < lo <= hi):
            raise PhantomSpecError(f"bad lesion radius range {self.lesion_radius_range}")
        onset, peak, height = self.contrast_curve_params
        if not (0 < onset < peak < self.n_frames):
            raise PhantomSpecError(
                f"bolus onset/peak {onset}/{peak} must fit in {self.n_frames} frames")
        if height <= 0:
            raise PhantomSpecError("bolus peak height must be positive")
        # lesion plus margin must fit inside the smallest possible brain ellipse
        if hi + _LESION_MARGIN >= _BRAIN_SEMI_MIN * self.image_size:
            raise PhantomSpecError(
                f"lesion radius {hi} cannot fit inside the brain ellipse "
                f"at image size {self.image_size}")


_LESION_MARGIN = 2.0
_BRAIN_SEMI_MIN = 0.33
_BOLUS_ALPHA = 4.0        # gamma-variate shape
_CORE_ENHANCE = 0.25      # bolus amplitude factor inside the core
_CORE_DELAY = 2           # frames of bolus delay inside the core; amplitude and
                          # delay are kept in the regime where the summed curve
                          # still peaks at the configured frame after smoothing
_PEN_ENHANCE = 0.85       # penumbra keeps normal timing, mildly lower amplitude
_PEN_RADIUS_FACTOR = 1.4  # penumbra outer radius relative to the core's
_TISSUE_BASE = 100.0      # pre-contrast attenuation inside the brain
# artifact blobs carry the exact map signature of a lesion (core factors plus
# a penumbra-like ring) but enhance nearly normally and on time, and the DWI
# stays normal: the maps alone cannot tell them from the real core
_ART_ENHANCE = (0.75, 0.9)
_ART_RING_ENHANCE = 0.92
_ART_RADIUS = (3.0, 7.0)


def gamma_variate(t, onset, peak, alpha=3.0):
    """Normalized bolus curve: 0 before onset, 1 exactly at the peak frame."""
    t = np.asarray(t, dtype=np.float64)
    u = (t - onset) / float(peak - onset)
    y = np.zeros_like(u)
    pos = u > 0
    y[pos] = u[pos] ** alpha * np.exp(alpha * (1.0 - u[pos]))
    return y


def _smooth_field(rng, size, window=9):
    """Zero-mean unit-std smooth random field (box-filtered white noise)."""
    field = rng.normal(size=(size, size))
    kernel = np.full(window, 1.0 / window)
    for axis in (0, 1):
        field = np.apply_along_axis(
            lambda row: np.convolve(np.pad(row, window // 2, mode="reflect"),
                                    kernel, mode="valid"), axis, field)
    sd = field.std()
    return (field - field.mean()) / (sd if sd > 0 else 1.0)


def generate_phantom_case(spec: PhantomSpec, case_index: int) -> CaseRecord:
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, case_index]))
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)

    # brain ellipse with jittered center and semi-axes
    cy = s / 2 + rng.uniform(-0.03, 0.03) * s
    cx = s / 2 + rng.uniform(-0.03, 0.03) * s
    ry = s * rng.uniform(_BRAIN_SEMI_MIN, 0.40)
    rx = s * rng.uniform(0.36, 0.44)
    brain = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0

    # lesion core inside the inscribed circle so the disk always fits
    radius = rng.uniform(*spec.lesion_radius_range)
    max_offset = min(ry, rx) - radius - _LESION_MARGIN
    if max_offset <= 0:
        raise PhantomSpecError(
            f"lesion radius {radius:.1f} exceeds brain ellipse (case {case_index})")
    angle = rng.uniform(0, 2 * np.pi)
    offset = np.sqrt(rng.uniform()) * max_offset
    ly, lx = cy + offset * np.sin(angle), cx + offset * np.cos(angle)
    dist = np.hypot(yy - ly, xx - lx)
    core = dist <= radius
    if spec.with_penumbra:
        pen = (dist <= radius * _PEN_RADIUS_FACTOR + 1.0) & ~core & brain
    else:
        pen = np.zeros_like(core)
    normal = brain & ~core & ~pen

    # map-only artifact blobs placed in normal tissue, away from the lesion;
    # count and enhancement vary per case so they carry no fixed template
    fake_core = np.zeros_like(core)
    fake_pen = np.zeros_like(core)
    fake_amp = np.zeros((s, s))
    n_art = int(rng.integers(1, spec.n_map_artifacts + 1)) \
        if spec.n_map_artifacts > 0 else 0
    for _ in range(n_art):
        ar = rng.uniform(*_ART_RADIUS)
        amp = rng.uniform(*_ART_ENHANCE)
        ring = ar * _PEN_RADIUS_FACTOR + 1.0
        for _attempt in range(20):
            aang = rng.uniform(0, 2 * np.pi)
            aoff = np.sqrt(rng.uniform()) * max(min(ry, rx) - ar - _LESION_MARGIN, 0.0)
            ay, ax = cy + aoff * np.sin(aang), cx + aoff * np.cos(aang)
            if (np.hypot(ay - ly, ax - lx)
                    > ring + radius * _PEN_RADIUS_FACTOR + 3.0):
                adist = np.hypot(yy - ay, xx - ax)
                fake_core |= adist <= ar
                fake_pen |= (adist <= ring) & (adist > ar)
                fake_amp[adist <= ar] = amp
                break
    fake_core &= normal
    fake_pen &= normal & ~fake_core

    textures = [_smooth_field(rng, s) for _ in range(6)]

    # dynamic CTP: gamma-variate bolus, attenuated and delayed inside the lesion
    onset, peak, height = spec.contrast_curve_params
    t = np.arange(spec.n_frames)
    curve_n = gamma_variate(t, onset, peak, _BOLUS_ALPHA)
    curve_c = _CORE_ENHANCE * gamma_variate(
        t, onset + _CORE_DELAY, peak + _CORE_DELAY, _BOLUS_ALPHA)
    curve_p = _PEN_ENHANCE * gamma_variate(t, onset, peak, _BOLUS_ALPHA)
    base = _TISSUE_BASE * (1.0 + 0.05 * spec.texture_amp / 0.15 * textures[0]) * brain
    enhance_tex = brain * (1.0 + spec.texture_amp * textures[1])
    normal_amp = np.where(fake_core, fake_amp,
                          np.where(fake_pen, _ART_RING_ENHANCE, 1.0)) * normal
    frames = (base[None]
              + height * enhance_tex[None]
              * (curve_n[:, None, None] * normal_amp[None]
                 + curve_c[:, None, None] * core[None]
                 + curve_p[:, None, None] * pen[None]))
    if spec.noise_sigma > 0:
        frames = frames + rng.normal(0.0, spec.noise_sigma * height, frames.shape)

    # perfusion maps: core flow markedly reduced, transit times prolonged;
    # penumbra only mildly hypoperfused but similarly delayed
    def make_map(level, tex, core_mult, pen_mult):
        mult = np.where(core | fake_core, core_mult,
                        np.where(pen | fake_pen, pen_mult, 1.0))
        field = level * (1.0 + spec.texture_amp * tex) * mult * brain
        if spec.noise_sigma > 0:
            field = field + rng.normal(
                0.0, spec.map_noise_mult * spec.noise_sigma * level, field.shape)
        return field

    f = spec.core_flow_factor
    g = spec.core_time_factor
    cbf = make_map(50.0, textures[2], f, 1.0 - 0.4 * (1.0 - f))
    cbv = make_map(4.0, textures[3], f, 1.0 - 0.3 * (1.0 - f))
    mtt = make_map(4.0, textures[4], g, 1.0 + 0.7 * (g - 1.0))
    tmax = make_map(2.0, textures[5], g, 1.0 + 0.8 * (g - 1.0))

    # DWI: hyperintense core only, on a [0,1] scale
    dwi = 0.05 + 0.25 * brain + spec.dwi_lesion_contrast * core
    if spec.noise_sigma > 0:
        dwi = dwi + rng.normal(0.0, spec.noise_sigma, dwi.shape)
    dwi = np.clip(dwi, 0.0, 1.0)

    mask = core.astype(np.float64)   # noise never touches the mask
    return CaseRecord(
        case_id=f"case_{case_index:03d}",
        ctp=CtpVolume(frames),
        maps=PerfusionMaps(cbf, cbv, mtt, tmax),
        dwi=dwi,
        mask=mask,
    )


def generate_dataset(spec: PhantomSpec, out_dir=None) -> list[CaseRecord]:
    spec.validate()
    cases = [generate_phantom_case(spec, i) for i in range(spec.n_cases)]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for case in cases:
            write_case(os.path.join(out_dir, case.case_id), case)
        with open(os.path.join(out_dir, "dataset.json"), "w") as fh:
            json.dump({"spec": dataclasses.asdict(spec),
                       "cases": [c.case_id for c in cases]}, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return cases
