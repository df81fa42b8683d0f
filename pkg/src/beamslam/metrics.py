"""Evaluation metrics: angle miss-distance, UE error, OSPA, NMSE, beam
management overhead, and spectral efficiency under perfect/imperfect CSI.

The two set metrics (angle miss-distance, OSPA) share one pattern: an exact
minimum-cost assignment between truth and estimate sets plus a cardinality
penalty per missing/extra element, normalized by the larger cardinality.
Assignments are solved exactly (Hungarian); distances are plain sums of
absolute angle gaps / Euclidean gaps with no cutoff.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Vec2

__all__ = [
    "MetricConfig",
    "MetricReport",
    "angle_error",
    "ue_error",
    "ospa",
    "nmse",
    "overhead",
    "se_perfect",
    "se_imperfect",
]


@dataclass(frozen=True)
class MetricConfig:
    c_angle: float = 0.1  # rad, per-path cardinality penalty scale
    c_map: float = 3.5  # m, per-anchor cardinality penalty
    frame_t: float = 1.0  # s, frame length for the SE prelog
    t_b: float = 1.0 / 16.0e3  # s per beam measurement (1/16 ms)
    est_reps: int = 16  # pilot repetitions for effective-channel estimation

    def __post_init__(self):
        if min(self.c_angle, self.c_map, self.frame_t, self.t_b) <= 0:
            raise ValueError("metric constants must be positive")
        if self.est_reps < 1:
            raise ValueError("est_reps must be >= 1")


@dataclass(frozen=True)
class MetricReport:
    e_angle: float
    e_ue: float
    ospa: float
    nmse: float
    t_bm: float
    measurement_count: int
    se_perfect: float
    se_imperfect: float

    def __post_init__(self):
        vals = (self.e_angle, self.e_ue, self.ospa, self.nmse, self.t_bm,
                self.measurement_count, self.se_perfect, self.se_imperfect)
        if any(v < 0 for v in vals):
            raise ValueError("metric values must be >= 0")
        if not math.isfinite(self.nmse):
            raise ValueError("nmse must be finite")


def _assignment_min(cost: np.ndarray) -> float:
    """Exact minimum-cost matching of the smaller set into the larger."""
    if cost.size == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def angle_error(truth: Sequence[Tuple[float, float]],
                est: Sequence[Tuple[float, float]], c_angle: float) -> float:
    """Multi-path angle miss-distance: matched |aoa|+|aod| gaps plus a
    2*c_angle penalty per unmatched path, over twice the larger count."""
    l_t, l_e = len(truth), len(est)
    if l_t == 0 and l_e == 0:
        warnings.warn("angle_error of two empty sets is 0 by convention", stacklevel=2)
        return 0.0
    l_max, l_delta = max(l_t, l_e), abs(l_t - l_e)
    cost = np.zeros((l_t, l_e))
    for i, (th, ph) in enumerate(truth):
        for j, (th_h, ph_h) in enumerate(est):
            cost[i, j] = abs(th - th_h) + abs(ph - ph_h)
    return (_assignment_min(cost) + 2.0 * c_angle * l_delta) / (2.0 * l_max)


def ue_error(truth: Vec2, est: Vec2) -> float:
    return truth.dist(est)


def ospa(truth_anchors: Sequence[Vec2], est_anchors: Sequence[Vec2],
         c_map: float) -> float:
    """Map miss-distance: matched Euclidean gaps (no cutoff) plus c_map per
    cardinality mismatch, over the larger count."""
    l_t, l_e = len(truth_anchors), len(est_anchors)
    if l_t == 0 and l_e == 0:
        warnings.warn("ospa of two empty sets is 0 by convention", stacklevel=2)
        return 0.0
    l_max, l_delta = max(l_t, l_e), abs(l_t - l_e)
    cost = np.zeros((l_t, l_e))
    for i, a in enumerate(truth_anchors):
        for j, b in enumerate(est_anchors):
            cost[i, j] = a.dist(b)
    return (_assignment_min(cost) + c_map * l_delta) / l_max


def nmse(h_true: np.ndarray, h_est: np.ndarray) -> float:
    denom = float(np.linalg.norm(h_true) ** 2)
    if denom <= 0.0:
        raise ValueError("true channel is zero; NMSE undefined")
    return float(np.linalg.norm(h_true - h_est) ** 2) / denom


def overhead(mode: str, layer_counts: Tuple[int, int], l_hat: int,
             t_b: float) -> Tuple[float, int]:
    """Beam-management time from the sweep/track accounting pair.

    layer_counts = (layer_measurements, probe_measurements) as reported by
    the beam module; every descent layer and every probe is a quad of
    beam-pair measurements, which is asserted as a sanity check.
    """
    if mode not in ("sweep", "track", "track+sweep"):
        raise ValueError(f"unknown mode {mode!r}")
    if l_hat < 0:
        raise ValueError("l_hat must be >= 0")
    layer, probe = layer_counts
    if layer < 0 or probe < 0 or layer % 4 or probe % 4:
        raise ValueError("measurement counts must be non-negative quads")
    count = layer + probe
    return count * t_b, count


def _precoder_combiner(h: np.ndarray, sigma: float):
    """Dominant right singular vector and the unit-normalized MMSE combiner."""
    u, s, vh = np.linalg.svd(h)
    f = vh[0].conj()
    hf = h @ f
    w = np.linalg.solve(np.outer(hf, hf.conj()) + sigma**2 * np.eye(len(hf)), hf)
    n = np.linalg.norm(w)
    if n <= 0.0 or not np.isfinite(n):
        w = hf / np.linalg.norm(hf)  # zero-noise limit: matched filter
    else:
        w = w / n
    return f, w


def se_perfect(h: np.ndarray, sigma: float) -> float:
    """Single-stream rate with the optimal precoder and MMSE combining."""
    if np.linalg.norm(h) <= 0.0:
        raise ValueError("channel is zero")
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    f, w = _precoder_combiner(h, sigma)
    gain = abs(np.vdot(w, h @ f)) ** 2
    return math.log2(1.0 + gain / sigma**2)


def se_imperfect(h_true: np.ndarray, h_est: np.ndarray, sigma: float,
                 t_bm: float, frame_t: float = 1.0, est_reps: int = 16,
                 rng: Optional[np.random.Generator] = None,
                 pilot_sigma: Optional[float] = None) -> float:
    """Rate with beams picked from the estimated channel and a pilot-estimated
    effective channel; time spent on beam management is lost to the prelog.

    The estimation mismatch enters the SINR denominator as self-interference.
    pilot_sigma defaults to sigma; zero makes the pilot stage exact.
    """
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    if t_bm >= frame_t:
        warnings.warn("beam management consumed the whole frame; rate is 0",
                      stacklevel=2)
        return 0.0
    if np.linalg.norm(h_est) <= 0.0:
        return 0.0  # nothing estimated: no link
    f_hat, w_hat = _precoder_combiner(h_est, sigma)
    h_eff = complex(np.vdot(w_hat, h_true @ f_hat))
    ps = sigma if pilot_sigma is None else pilot_sigma
    if ps > 0.0:
        if rng is None:
            raise ValueError("noisy pilots need an rng")
        noise = (rng.normal(size=est_reps) + 1j * rng.normal(size=est_reps))
        h_eff_hat = h_eff + ps / math.sqrt(2.0) * noise.mean()
    else:
        h_eff_hat = h_eff
    mismatch = abs(h_eff - h_eff_hat) ** 2
    sinr = abs(h_eff_hat) ** 2 / (sigma**2 + mismatch)
    return (frame_t - t_bm) / frame_t * math.log2(1.0 + sinr)
