"""Beam management: hierarchical sweeping with interference cancellation,
prior-aided tracking, and the sweeping/tracking switching detector.

All three estimators share one bisection descent: measure the four beam-pair
combinations of a two-beam UE subset and a two-beam BS subset, cancel the
already-estimated paths' contribution, keep the strongest combination, and
halve both windows until single bins remain.  Sweeping starts from the full
grid; tracking starts from windows sized by prior angle uncertainty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .channel import (
    ArrayConfig,
    NoiseModel,
    PathParams,
    array_response,
    assemble_channel,
    measure_beam_pair,
)
from .codebook import (
    AngularGrid,
    HierarchicalCodebook,
    get_factory,
    start_window,
    tracking_start_layer,
)
from .geometry import Vec2, bearing, fold_angle

_KAPPA_FLOOR = 1e-12


@dataclass(frozen=True)
class PathEstimate:
    aoa_hat: float
    aod_hat: float
    gain_hat: complex

    def __post_init__(self):
        if not (0.0 < self.aoa_hat < math.pi and 0.0 < self.aod_hat < math.pi):
            raise ValueError("estimated angles outside (0, pi)")


@dataclass(frozen=True)
class PathEstimateSet:
    """Estimates ordered by descending |gain|, plus measurement accounting.

    measurement_count covers descent layers and termination probes; gain
    refinement repetitions are tallied separately and not billed to it.
    """

    estimates: Tuple[PathEstimate, ...] = ()
    layer_measurements: int = 0
    probe_measurements: int = 0
    refine_measurements: int = 0

    @property
    def l_hat(self) -> int:
        return len(self.estimates)

    @property
    def measurement_count(self) -> int:
        return self.layer_measurements + self.probe_measurements


@dataclass(frozen=True)
class SweepConfig:
    r_min: float
    delta_r_min: float
    l_max: int = 8
    gain_refine_reps: int = 8
    fixed_path_count: Optional[int] = None

    def __post_init__(self):
        if self.r_min <= 0 or self.delta_r_min <= 0:
            raise ValueError("residual thresholds must be positive")
        if self.l_max < 1 or self.gain_refine_reps < 1:
            raise ValueError("l_max and gain_refine_reps must be >= 1")
        if self.fixed_path_count is not None and self.fixed_path_count < 1:
            raise ValueError("fixed_path_count must be >= 1 when set")

    @classmethod
    def for_sigma(cls, sigma: float, **kwargs) -> "SweepConfig":
        """Probe thresholds at 3 sigma, floored so sigma=0 stays valid."""
        r = max(3.0 * sigma, 1e-9)
        return cls(r_min=r, delta_r_min=r, **kwargs)


@dataclass(frozen=True)
class SwitchThresholds:
    e_min: float = 0.05
    delta_e_min: float = 0.5
    g_los: float = 0.6


@dataclass(frozen=True)
class SwitchState:
    d_flag: bool = True
    e_prev: float = 0.0
    thresholds: SwitchThresholds = SwitchThresholds()

    def __post_init__(self):
        if self.e_prev < 0:
            raise ValueError("e_prev must be >= 0")


@dataclass(frozen=True)
class PathPrior:
    theta_va: float
    phi_va: float
    theta_scale: float
    phi_scale: float
    kind: str = "VA"
    degraded: bool = False


@dataclass(frozen=True)
class PriorAngleInfo:
    paths: Tuple[PathPrior, ...] = ()


@dataclass(frozen=True)
class TrackedAnchor:
    kind: str  # "PA" | "VA"
    mean: Vec2
    sigma_r: float  # std of particle distances from the cloud mean
    last_gain: float


@dataclass(frozen=True)
class MapSnapshot:
    """Radio-map view sufficient for prior construction (no filter internals)."""

    pa_mean: Vec2
    ue_sigma: float
    tracked: Tuple[TrackedAnchor, ...] = ()


@dataclass(frozen=True)
class BeamManagementResult:
    estimates: PathEstimateSet
    measurement_count: int
    state: "SwitchState"
    mode: str  # sweep | track | track+sweep


def partial_channel(estimates: PathEstimateSet, bs: ArrayConfig, ue: ArrayConfig) -> np.ndarray:
    params = [PathParams(e.aoa_hat, e.aod_hat, e.gain_hat) for e in estimates.estimates]
    return assemble_channel(params, bs, ue)


def _unit(coeff: np.ndarray) -> np.ndarray:
    return coeff / np.linalg.norm(coeff)


@dataclass
class _Counters:
    layer: int = 0
    probe: int = 0
    refine: int = 0


def _half(win: Tuple[int, int], m: int) -> Tuple[int, int]:
    lo, hi = win
    w = (hi - lo + 1) // 2
    return (lo, lo + w - 1) if m == 0 else (lo + w, hi)


class _SicLedger:
    """Estimated paths plus their finest-beam calibration measurements.

    Each completed descent contributes one averaged finest-beam measurement
    y = w^H H f.  Because every finest beam also picks up sidelobe leakage
    from the other paths, per-path division by its own calibration factor
    leaves a small bias that stops interference cancellation from converging.
    Re-solving the joint linear system y_i = sum_j g_j (w_i^H a_ue_j)(a_bs_j^H f_i)
    after every new path removes that bias (exactly so without noise).
    """

    def __init__(self, ue_cfg, bs_cfg):
        self.ue_cfg, self.bs_cfg = ue_cfg, bs_cfg
        self.angles, self.resp_ue, self.resp_bs = [], [], []
        self.beams_w, self.beams_f, self.meas = [], [], []
        self.gains = np.zeros(0, dtype=complex)

    def add(self, theta, phi, win_w, win_f, y_mean):
        self.angles.append((theta, phi))
        self.resp_ue.append(array_response(self.ue_cfg, theta))
        self.resp_bs.append(array_response(self.bs_cfg, phi))
        self.beams_w.append(win_w)
        self.beams_f.append(win_f)
        self.meas.append(y_mean)
        n = len(self.meas)
        k = np.empty((n, n), dtype=complex)
        for i in range(n):
            for j in range(n):
                k[i, j] = np.vdot(self.beams_w[i], self.resp_ue[j]) * np.vdot(
                    self.resp_bs[j], self.beams_f[i]
                )
        if abs(np.linalg.det(k)) > _KAPPA_FLOOR:
            self.gains = np.linalg.solve(k, np.array(self.meas))
        else:  # degenerate geometry (duplicate bins / orthogonal beams)
            self.gains = np.linalg.lstsq(k, np.array(self.meas), rcond=None)[0]

    def estimates(self):
        return [
            PathEstimate(t, p, complex(g))
            for (t, p), g in zip(self.angles, self.gains)
        ]

    def partial(self):
        params = [
            PathParams(t, p, complex(g))
            for (t, p), g in zip(self.angles, self.gains)
        ]
        return assemble_channel(params, self.bs_cfg, self.ue_cfg)


def _estimate_path(h, h_part, grid, ue_factory, bs_factory, ue_win, bs_win,
                   j_start, noise, cfg, counters, probe):
    """One bisection descent; returns (theta, phi, beams, y) or None if probed out."""
    j_total = grid.n_bins.bit_length() - 1
    win_w = win_f = None
    for j in range(j_start, j_total + 1):
        w_pair = [_unit(b.coefficients) for b in ue_factory.pair(*ue_win)]
        f_pair = [_unit(b.coefficients) for b in bs_factory.pair(*bs_win)]
        resid = np.empty((2, 2), dtype=complex)
        for mu in range(2):
            for mb in range(2):
                raw = measure_beam_pair(h, w_pair[mu], f_pair[mb], noise)
                resid[mu, mb] = raw - w_pair[mu].conj() @ h_part @ f_pair[mb]
        amps = np.abs(resid)
        if probe and j == j_start:
            if amps.max() < cfg.r_min and amps.max() - amps.min() < cfg.delta_r_min:
                counters.probe += 4
                return None
        counters.layer += 4
        mu, mb = np.unravel_index(int(np.argmax(amps)), (2, 2))
        win_w, win_f = w_pair[mu], f_pair[mb]
        ue_win = _half(ue_win, mu)
        bs_win = _half(bs_win, mb)
    theta = grid.center_of(ue_win[0])
    phi = grid.center_of(bs_win[0])
    acc = 0.0 + 0.0j
    for _ in range(cfg.gain_refine_reps):
        acc += measure_beam_pair(h, win_w, win_f, noise)
    counters.refine += cfg.gain_refine_reps
    return theta, phi, win_w, win_f, acc / cfg.gain_refine_reps


def _finalize(ledger: _SicLedger, cfg: SweepConfig):
    """Order by descending |gain|, dropping entries the re-solve zeroed out.

    When a descent mis-lands and a later one captures the same path exactly,
    the joint gain solve hands the mis-landed entry a negligible gain; such
    entries carry no channel energy and do not count as paths.
    """
    kept = [e for e in ledger.estimates() if abs(e.gain_hat) >= cfg.r_min]
    return sorted(kept, key=lambda e: -abs(e.gain_hat))


def _codebook_context(cb_bs: HierarchicalCodebook, cb_ue: HierarchicalCodebook):
    if cb_bs.side != "BS" or cb_ue.side != "UE":
        raise ValueError("codebook sides must be (BS, UE)")
    if cb_bs.n_layers != cb_ue.n_layers:
        raise ValueError("codebooks built on different grids")
    grid = AngularGrid(1 << cb_bs.n_layers)
    bs_cfg = ArrayConfig(len(cb_bs.subset(1, 1)[0].coefficients), "BS")
    ue_cfg = ArrayConfig(len(cb_ue.subset(1, 1)[0].coefficients), "UE")
    return grid, bs_cfg, ue_cfg


def hierarchical_sweep(h: np.ndarray, cb_bs: HierarchicalCodebook,
                       cb_ue: HierarchicalCodebook, noise: NoiseModel,
                       cfg: SweepConfig) -> PathEstimateSet:
    """Full-grid path extraction: descend, cancel, repeat until probed out.

    With fixed_path_count set, exactly that many paths are extracted and no
    termination probes are spent.
    """
    grid, bs_cfg, ue_cfg = _codebook_context(cb_bs, cb_ue)
    ue_factory = get_factory(ue_cfg, grid)
    bs_factory = get_factory(bs_cfg, grid)
    counters = _Counters()
    ledger = _SicLedger(ue_cfg, bs_cfg)
    h_part = np.zeros((ue_cfg.n_elements, bs_cfg.n_elements), dtype=complex)
    estimating = cfg.fixed_path_count is None
    max_paths = cfg.l_max if estimating else cfg.fixed_path_count
    full = (1, grid.n_bins)
    for _ in range(max_paths):
        hit = _estimate_path(h, h_part, grid, ue_factory, bs_factory, full, full,
                             1, noise, cfg, counters, probe=estimating)
        if hit is None:
            break
        ledger.add(*hit)
        h_part = ledger.partial()
    found = _finalize(ledger, cfg)
    return PathEstimateSet(tuple(found), counters.layer, counters.probe, counters.refine)


def feature_track(h: np.ndarray, priors: PriorAngleInfo, grid: AngularGrid,
                  bs_cfg: ArrayConfig, ue_cfg: ArrayConfig, noise: NoiseModel,
                  cfg: SweepConfig) -> PathEstimateSet:
    """Prior-windowed descent per path; dead paths are probed out and dropped.

    Priors are processed in list order (callers pass descending previous
    gain); both sides start at the wider of the two sides' start layers.
    """
    ue_factory = get_factory(ue_cfg, grid)
    bs_factory = get_factory(bs_cfg, grid)
    counters = _Counters()
    ledger = _SicLedger(ue_cfg, bs_cfg)
    h_part = np.zeros((ue_cfg.n_elements, bs_cfg.n_elements), dtype=complex)
    for prior in priors.paths:
        j0 = min(tracking_start_layer(grid, prior.theta_scale),
                 tracking_start_layer(grid, prior.phi_scale))
        ue_win = start_window(grid, grid.bin_of(prior.theta_va), j0)
        bs_win = start_window(grid, grid.bin_of(prior.phi_va), j0)
        hit = _estimate_path(h, h_part, grid, ue_factory, bs_factory, ue_win, bs_win,
                             j0, noise, cfg, counters, probe=True)
        if hit is None:
            continue
        ledger.add(*hit)
        h_part = ledger.partial()
    found = _finalize(ledger, cfg)
    return PathEstimateSet(tuple(found), counters.layer, counters.probe, counters.refine)


def channel_power(estimates: PathEstimateSet, thresholds: SwitchThresholds,
                  bs: ArrayConfig, ue: ArrayConfig) -> Tuple[float, int]:
    """Non-LoS reconstructed power, plus a LoS-present indicator.

    E = ||H_hat - H_los_hat||_F^2 + e_los * delta_e_min; the additive constant
    keeps a LoS-only channel's power above the collapse floor.
    """
    if estimates.l_hat == 0:
        return 0.0, 0
    gains = [abs(e.gain_hat) for e in estimates.estimates]
    e_los = 1 if max(gains) > thresholds.g_los else 0
    h_full = partial_channel(estimates, bs, ue)
    if e_los:
        strongest = max(estimates.estimates, key=lambda e: abs(e.gain_hat))
        h_los = assemble_channel(
            [PathParams(strongest.aoa_hat, strongest.aod_hat, strongest.gain_hat)], bs, ue
        )
        diff = h_full - h_los
    else:
        diff = h_full
    return float(np.linalg.norm(diff) ** 2 + e_los * thresholds.delta_e_min), e_los


def decide_switch(e_now: float, e_prev: float, thresholds: SwitchThresholds) -> bool:
    """True when power collapses below the floor or jumps relative to last step."""
    if e_now < thresholds.e_min:
        return True
    if e_prev <= 0.0:
        return True
    return abs(e_now - e_prev) / e_prev > thresholds.delta_e_min


def run_beam_management(h: np.ndarray, cb_bs: HierarchicalCodebook,
                        cb_ue: HierarchicalCodebook, priors: Optional[PriorAngleInfo],
                        noise: NoiseModel, cfg: SweepConfig,
                        state: SwitchState) -> BeamManagementResult:
    """One step of the switching logic.

    Sweep if the previous step flagged a change (or no priors exist); else
    track, and if tracking itself trips the detector, rerun a compensating
    sweep and adopt its results.  The new flag is computed from the adopted
    results against the previous step's power.
    """
    grid, bs_cfg, ue_cfg = _codebook_context(cb_bs, cb_ue)
    thr = state.thresholds
    if state.d_flag or priors is None or not priors.paths:
        result = hierarchical_sweep(h, cb_bs, cb_ue, noise, cfg)
        mode = "sweep"
        count = result.measurement_count
    else:
        result = feature_track(h, priors, grid, bs_cfg, ue_cfg, noise, cfg)
        mode = "track"
        count = result.measurement_count
        e_mid, _ = channel_power(result, thr, bs_cfg, ue_cfg)
        if decide_switch(e_mid, state.e_prev, thr):
            result = hierarchical_sweep(h, cb_bs, cb_ue, noise, cfg)
            mode = "track+sweep"
            count += result.measurement_count
    e_now, _ = channel_power(result, thr, bs_cfg, ue_cfg)
    d_new = decide_switch(e_now, state.e_prev, thr)
    return BeamManagementResult(result, count, SwitchState(d_new, e_now, thr), mode)


# --- prior-angle construction from the radio map ---


def _bisector_hit(pa: Vec2, va: Vec2, ue: Vec2) -> Optional[Vec2]:
    """Reflection point implied by a VA hypothesis: where segment va->ue
    crosses the perpendicular bisector of (pa, va)."""
    normal = va - pa
    if normal.norm() < 1e-12:
        return None
    mid = Vec2(0.5 * (pa.x + va.x), 0.5 * (pa.y + va.y))
    direction = ue - va
    den = direction.x * normal.x + direction.y * normal.y
    if abs(den) < 1e-12:
        return None
    t = ((mid.x - va.x) * normal.x + (mid.y - va.y) * normal.y) / den
    if not 0.0 < t < 1.0:
        return None
    return Vec2(va.x + t * direction.x, va.y + t * direction.y)


def _midrange(angles) -> Tuple[float, float]:
    """Center and spread of pi-periodic angles, unwrapped around the first."""
    ref = angles[0]
    unwrapped = [ref + ((a - ref + math.pi / 2) % math.pi) - math.pi / 2 for a in angles]
    lo, hi = min(unwrapped), max(unwrapped)
    return fold_angle(0.5 * (lo + hi)), hi - lo


def _clamp_scale(scale: float, grid: AngularGrid) -> float:
    return min(max(scale, grid.resolution), math.pi)


def transform_priors(snapshot: MapSnapshot, ue_pred: Vec2, c_angle: float,
                     grid: AngularGrid, circle_samples: int = 32) -> PriorAngleInfo:
    """Angle windows per tracked path from anchor clouds and the UE prediction.

    The covering radius combines anchor and UE cloud spreads; a radius at or
    beyond the anchor distance degrades that prior to a full-range window.
    """
    priors = []
    for anchor in snapshot.tracked:
        sigma = math.hypot(anchor.sigma_r, snapshot.ue_sigma)
        radius = c_angle * sigma
        if anchor.kind == "PA":
            d = anchor.mean.dist(ue_pred)
            center = bearing(anchor.mean, ue_pred)
            if radius >= d or d == 0.0:
                priors.append(PathPrior(center, center, math.pi, math.pi, "PA", True))
                continue
            scale = _clamp_scale(2.0 * math.asin(radius / d), grid)
            priors.append(PathPrior(center, center, scale, scale, "PA", False))
            continue
        va, pa = anchor.mean, snapshot.pa_mean
        aoas, aods = [], []
        for k in range(circle_samples):
            ang = 2.0 * math.pi * k / circle_samples
            v = Vec2(va.x + radius * math.cos(ang), va.y + radius * math.sin(ang))
            hit = _bisector_hit(pa, v, ue_pred)
            if hit is None:
                continue
            aoas.append(bearing(ue_pred, v))
            aods.append(bearing(pa, hit))
        if not aoas:
            priors.append(PathPrior(bearing(ue_pred, va), bearing(pa, va),
                                    math.pi, math.pi, "VA", True))
            continue
        theta_c, theta_r = _midrange(aoas)
        phi_c, phi_r = _midrange(aods)
        priors.append(PathPrior(theta_c, phi_c, _clamp_scale(theta_r, grid),
                                _clamp_scale(phi_r, grid), "VA", False))
    return PriorAngleInfo(tuple(priors))
