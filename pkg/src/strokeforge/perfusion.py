"""CTP front end: time-density curve, smoothing, bolus time-point detection
and uniform frame sampling, plus the deep feature-map extraction step.

The summed curve stands in for an arterial input function but is used only to
locate the enhancement interval; no deconvolution is performed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad, sigmoid

SMOOTH_WINDOW = 5
#: fraction of the enhancement height above baseline that counts as "enhancing"
THRESHOLD_FRACTION = 0.1
#: baseline is averaged over the first max(3, T // 10) frames
MIN_BASELINE_FRAMES = 3


class DetectionError(ValueError):
    """No contrast enhancement found; caller should fall back to full range."""


@dataclass
class CtpVolume:
    frames: np.ndarray          # [T,H,W] attenuation intensities
    frame_interval: float = 1.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ValueError(f"CTP volume must be [T,H,W], got {self.frames.shape}")
        if self.frames.shape[0] < 8:
            raise ValueError(f"need at least 8 frames, got {self.frames.shape[0]}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("CTP volume contains non-finite intensities")


@dataclass
class TimeDensityCurve:
    values: np.ndarray
    smoothed: np.ndarray
    onset_idx: int
    peak_idx: int
    end_idx: int
    fallback: bool = False


def time_density_curve(v: CtpVolume) -> np.ndarray:
    """Per-frame sum over all pixels."""
    return v.frames.sum(axis=(1, 2))


def smooth_curve(c) -> np.ndarray:
    """Window-5 moving average with replicate padding; output length == input."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 1 or c.size < SMOOTH_WINDOW:
        raise ValueError(f"curve must be 1-d with >= {SMOOTH_WINDOW} samples, got {c.shape}")
    half = SMOOTH_WINDOW // 2
    padded = np.pad(c, half, mode="edge")
    return np.convolve(padded, np.full(SMOOTH_WINDOW, 1.0 / SMOOTH_WINDOW), mode="valid")


def detect_time_points(smoothed) -> tuple[int, int, int]:
    """Locate enhancement onset, peak and end on a smoothed curve.

    Baseline is the mean of the leading frames; onset is the first index up to
    the peak rising above baseline + 0.1 * enhancement height, and end is the
    first index after the peak falling back below it (last frame if it never
    does). The rule is invariant to positive affine rescaling of the curve.
    """
    s = np.asarray(smoothed, dtype=np.float64)
    t = s.size
    n_base = max(MIN_BASELINE_FRAMES, t // 10)
    baseline = s[:n_base].mean()
    peak = int(np.argmax(s))          # first maximum under ties
    peak_value = s[peak]
    if peak_value <= baseline:
        raise DetectionError("no contrast enhancement above baseline")
    threshold = baseline + THRESHOLD_FRACTION * (peak_value - baseline)

    onset = peak
    for i in range(peak + 1):
        if s[i] > threshold:
            onset = i
            break
    end = t - 1
    for i in range(peak + 1, t):
        if s[i] < threshold:
            end = i
            break
    return onset, peak, end


def analyze_volume(v: CtpVolume) -> TimeDensityCurve:
    """Full curve analysis with the documented full-range fallback."""
    raw = time_density_curve(v)
    smoothed = smooth_curve(raw)
    try:
        onset, peak, end = detect_time_points(smoothed)
        fallback = False
    except DetectionError:
        onset, peak, end = 0, int(np.argmax(smoothed)), raw.size - 1
        fallback = True
    return TimeDensityCurve(raw, smoothed, onset, peak, end, fallback)


def sample_frames(v: CtpVolume, onset_idx: int, end_idx: int, n: int = 6) -> np.ndarray:
    """Stack ``n`` frames sampled uniformly over [onset_idx, end_idx]."""
    if onset_idx > end_idx:
        raise ValueError(f"onset {onset_idx} > end {end_idx}")
    idx = np.round(np.linspace(onset_idx, end_idx, n)).astype(int)
    return v.frames[idx]


def normalize_stack(stack: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Zero-mean unit-variance over the whole stack (one case)."""
    stack = np.asarray(stack, dtype=np.float64)
    sd = stack.std()
    return (stack - stack.mean()) / (sd + eps)


def extract_features(v: CtpVolume, extractor, n: int = 6):
    """Sampled-frame stack through the extractor network.

    Returns the final-layer map before the sigmoid and the sigmoid probability
    map, both [H,W].
    """
    tdc = analyze_volume(v)
    stack = normalize_stack(sample_frames(v, tdc.onset_idx, tdc.end_idx, n))
    with no_grad():
        pre = extractor(Tensor(stack[None]), training=False)
        prob = sigmoid(pre)
    return pre.data[0, 0], prob.data[0, 0]
