"""IMU-aided UE prediction and a particle filter building the radio map.

The map holds one particle cloud per anchor (the physical BS and the virtual
mirror sources created by walls) plus a cloud for the UE itself.  Each step:
predict the UE cloud from the IMU-based position prediction, associate the
measured path angles to anchors by nearest predicted bearing, reweight the
clouds with Gaussian bearing likelihoods, resample when weights degenerate,
and spawn candidate anchors along the rays of unmatched angles.  Bearings are
folded to (0, pi) throughout: a ULA cannot tell front from back, so candidate
anchors are born on both lobes and triangulation starves the wrong one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .beam import MapSnapshot, PathEstimate, PathEstimateSet, TrackedAnchor, _bisector_hit
from .geometry import Vec2, bearing

__all__ = [
    "ImuReading",
    "ParticleCloud",
    "AnchorTrack",
    "RadioMap",
    "SlamConfig",
    "imu_sample",
    "predict_ue",
    "systematic_resample",
    "slam_step",
    "map_estimate",
]


@dataclass(frozen=True)
class ImuReading:
    accel: Vec2  # m/s^2; Vec2 construction already rejects non-finite values


def imu_sample(true_accel: Vec2, sigma_imu: float, rng: np.random.Generator) -> ImuReading:
    """True acceleration plus independent per-axis Gaussian sensor noise."""
    if sigma_imu < 0:
        raise ValueError("sigma_imu must be >= 0")
    if sigma_imu == 0.0:
        return ImuReading(true_accel)
    nx, ny = rng.normal(0.0, sigma_imu, size=2)
    return ImuReading(Vec2(true_accel.x + nx, true_accel.y + ny))


def predict_ue(x_prev: Vec2, x_prev2: Optional[Vec2], a_prev: Optional[ImuReading],
               a_prev2: Optional[ImuReading], dt: float) -> Tuple[Vec2, Vec2]:
    """Dead-reckon the next position from two position fixes and the IMU.

    The velocity estimate differences the last two positions and adds half a
    step of the older acceleration (the mean-value correction that removes
    the O(dt) bias of the plain difference), so a constant-acceleration
    trajectory with exact history is predicted exactly.  With fewer than two
    history points the prediction degrades to standing still (cold start).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if x_prev2 is None or a_prev is None or a_prev2 is None:
        return x_prev, Vec2(0.0, 0.0)
    v_hat = (x_prev - x_prev2).scaled(1.0 / dt) + a_prev2.accel.scaled(0.5 * dt)
    x_pred = x_prev + v_hat.scaled(dt) + a_prev.accel.scaled(0.5 * dt * dt)
    v_pred = v_hat + a_prev.accel.scaled(dt)
    return x_pred, v_pred


@dataclass(frozen=True)
class ParticleCloud:
    """Positions (P, 2) with normalized non-negative weights (P,)."""

    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pos, w = np.asarray(self.positions, float), np.asarray(self.weights, float)
        if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] < 2:
            raise ValueError("positions must be (P, 2) with P >= 2")
        if w.shape != (pos.shape[0],):
            raise ValueError("weights shape must match particle count")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, positions: np.ndarray) -> "ParticleCloud":
        p = np.asarray(positions, float)
        return cls(p, np.full(len(p), 1.0 / len(p)))

    @property
    def n(self) -> int:
        return len(self.weights)

    def mean(self) -> Vec2:
        m = self.weights @ self.positions
        return Vec2(float(m[0]), float(m[1]))

    def sigma_r(self) -> float:
        """Weighted std of particle distances from the cloud mean."""
        m = self.weights @ self.positions
        d = np.hypot(self.positions[:, 0] - m[0], self.positions[:, 1] - m[1])
        mu = self.weights @ d
        return float(math.sqrt(max(self.weights @ (d - mu) ** 2, 0.0)))

    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))


@dataclass(frozen=True)
class SlamConfig:
    """Filter knobs; defaults sized for a one-bin angle error at N=512."""

    sigma_angle: float = math.pi / 512
    gate: Optional[float] = None  # base association gate; default 3*sigma_angle
    birth_range: Tuple[float, float] = (1.0, 50.0)
    resample_threshold: float = 0.5
    confirm_hits: int = 2
    n_particles: int = 1000
    process_noise: float = 0.01  # UE prediction jitter std (m)
    retire_misses: int = 3
    roughening: float = 0.02  # post-resample jitter std (m), keeps sigma_r honest
    clutter: float = 1e-6  # uniform likelihood floor, bounds a bad angle's damage
    confirm_spread: float = 1.0  # max cloud sigma_r (m) to report a position
    coldstart_spread: float = 0.0  # prediction std (m) before velocity history

    def __post_init__(self):
        if self.sigma_angle <= 0 or self.process_noise <= 0:
            raise ValueError("sigma_angle and process_noise must be positive")
        if self.gate is not None and self.gate <= 0:
            raise ValueError("gate must be positive when set")
        d_min, d_max = self.birth_range
        if not 0 < d_min < d_max:
            raise ValueError("birth_range must satisfy 0 < d_min < d_max")
        if not 0 < self.resample_threshold <= 1:
            raise ValueError("resample_threshold must be in (0, 1]")
        if self.confirm_hits < 1 or self.n_particles < 2 or self.retire_misses < 1:
            raise ValueError("confirm_hits, n_particles, retire_misses too small")
        if self.roughening < 0 or self.clutter < 0:
            raise ValueError("roughening and clutter must be >= 0")
        if self.confirm_spread <= 0:
            raise ValueError("confirm_spread must be positive")
        if self.coldstart_spread < 0:
            raise ValueError("coldstart_spread must be >= 0")

    @property
    def base_gate(self) -> float:
        return self.gate if self.gate is not None else 3.0 * self.sigma_angle


@dataclass(frozen=True)
class AnchorTrack:
    cloud: ParticleCloud
    kind: str  # "PA" | "VA"
    last_seen: int
    confirmed: bool = False
    hits: int = 0
    last_gain: float = 0.0
    pinned: bool = False  # known-BS mode: cloud is a delta, never reweighted
    retired: bool = False  # out of association; still reported in the map
    localized: bool = False  # cloud collapsed enough for its mean to be a fix
    # matched fixes (ue_x, ue_y, ue_spread, aoa, aod), newest last: the raw
    # material for re-solving the position over the whole observation arc
    fixes: Tuple[Tuple[float, float, float, float, float], ...] = ()

    def __post_init__(self):
        if self.kind not in ("PA", "VA"):
            raise ValueError(f"anchor kind must be PA or VA, got {self.kind!r}")

    @property
    def mean(self) -> Vec2:
        return self.cloud.mean()


@dataclass(frozen=True)
class RadioMap:
    """One run's belief state: UE cloud, anchor clouds, and the run's RNG."""

    ue: ParticleCloud
    anchors: Tuple[AnchorTrack, ...]
    ue_prev: Vec2
    ue_velocity: Vec2
    step: int
    rng: np.random.Generator
    weight_resets: int = 0  # times a zero-likelihood update forced a uniform reset
    pa_misses: int = 0  # consecutive steps with no measurement matching the PA
    pred_gap: float = 0.0  # how far the last update pulled the mean off its prediction

    def __post_init__(self):
        if sum(1 for t in self.anchors if t.kind == "PA") > 1:
            raise ValueError("at most one PA anchor")

    @property
    def ue_estimate(self) -> Vec2:
        return self.ue.mean()

    @property
    def pa(self) -> Optional[AnchorTrack]:
        return next((t for t in self.anchors if t.kind == "PA"), None)

    @classmethod
    def create(cls, cfg: SlamConfig, rng: np.random.Generator, ue_init: Vec2,
               ue_spread: float, known_bs: Optional[Vec2] = None) -> "RadioMap":
        """Fresh map: UE cloud around the initial fix, optional pinned BS."""
        pos = np.column_stack([
            rng.normal(ue_init.x, max(ue_spread, 1e-6), cfg.n_particles),
            rng.normal(ue_init.y, max(ue_spread, 1e-6), cfg.n_particles),
        ])
        anchors: Tuple[AnchorTrack, ...] = ()
        if known_bs is not None:
            delta = ParticleCloud.uniform(np.tile([known_bs.x, known_bs.y], (cfg.n_particles, 1)))
            anchors = (AnchorTrack(delta, "PA", last_seen=0, confirmed=True,
                                   hits=cfg.confirm_hits, last_gain=1.0,
                                   pinned=True, localized=True),)
        return cls(ParticleCloud.uniform(pos), anchors, ue_init, Vec2(0.0, 0.0), 0, rng)

    def snapshot(self) -> MapSnapshot:
        """Prior-construction view: confirmed, localized, in-track anchors by
        falling gain — a cloud still spread along its birth ray has no usable
        angle window to offer."""
        pa = self.pa
        pa_mean = pa.mean if pa is not None else self.ue_estimate
        tracked = tuple(
            TrackedAnchor(t.kind, t.mean, t.cloud.sigma_r(), t.last_gain)
            for t in sorted(
                (t for t in self.anchors
                 if t.confirmed and t.localized and not t.retired),
                key=lambda t: -t.last_gain,
            )
        )
        return MapSnapshot(pa_mean=pa_mean, ue_sigma=self.ue.sigma_r(), tracked=tracked)


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn with one uniform offset per comb tooth (low variance)."""
    w = np.asarray(weights, float)
    n = len(w)
    edges = np.cumsum(w)
    edges[-1] = 1.0  # guard the last bin against rounding
    u = (rng.random() + np.arange(n)) / n
    return np.searchsorted(edges, u, side="right").clip(0, n - 1)


def _fold_diff(a, b):
    """Signed difference of pi-periodic bearings, in (-pi/2, pi/2]."""
    return (np.asarray(a) - b + 0.5 * math.pi) % math.pi - 0.5 * math.pi


def _circ_stats(bearings: np.ndarray, weights: np.ndarray) -> Tuple[float, float]:
    """Weighted circular mean and std of pi-periodic bearings.

    Works on the doubled angle so the two lobes of a freshly born ray cloud
    (which fold to the same bearing) agree instead of cancelling.
    """
    z = np.sum(weights * np.exp(2j * np.asarray(bearings)))
    r = min(float(np.abs(z)), 1.0)
    if r <= 1e-12:
        return 0.0, 0.5 * math.pi  # no direction at all: maximally spread
    mean = (float(np.angle(z)) / 2.0) % math.pi
    std = 0.5 * math.sqrt(max(-2.0 * math.log(r), 0.0))
    return mean, std


def _bearings_from(points: np.ndarray, target: Vec2) -> np.ndarray:
    """Folded bearing of `target` as seen from each row of `points`."""
    raw = np.arctan2(target.y - points[:, 1], target.x - points[:, 0]) + 0.5 * math.pi
    return raw % math.pi


def _bearings_to(origin: Vec2, points: np.ndarray) -> np.ndarray:
    """Folded bearing of each row of `points` as seen from `origin`."""
    raw = np.arctan2(points[:, 1] - origin.y, points[:, 0] - origin.x) + 0.5 * math.pi
    return raw % math.pi


def _aod_diffs(bs: Vec2, a_xy: np.ndarray, u_xy: np.ndarray,
               aod_meas: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row departure-bearing innovation for mirrored-anchor hypotheses.

    A virtual anchor stands for the BS mirrored across some wall; the wall
    each hypothesis implies is therefore the perpendicular bisector of
    (bs, anchor), and the path leaves the BS toward the point where the
    anchor->UE segment crosses it.  That predicted departure bearing ties an
    anchor's *range* to the BS — arrival bearings alone never do, which is
    what lets a whole map slide radially.  Rows of `a_xy` pair (or
    broadcast) with rows of `u_xy`; rows with no physical crossing return
    the worst-case innovation: a mirror hypothesis that cannot produce any
    reflection toward the UE (the fold-ambiguous far lobe, mostly) did not
    produce this measurement.

    Returns (diffs, bs_range, tau) where bs_range is each reflection point's
    distance from the BS and tau its fractional position along the
    anchor->UE segment (both size the noise cone: the reflection point only
    moves tau times as far as the UE does).
    """
    a_xy, u_xy = np.broadcast_arrays(a_xy, u_xy)
    b = np.array([bs.x, bs.y])
    n = a_xy - b
    seg = u_xy - a_xy
    den = np.einsum("ij,ij->i", seg, n)
    nn = np.einsum("ij,ij->i", n, n)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(np.abs(den) > 1e-12, -0.5 * nn / den, np.nan)
    ok = np.isfinite(tau) & (tau > 0.0) & (tau < 1.0) & (nn > 1e-12)
    tau = np.where(ok, tau, 0.5)
    r = a_xy + tau[:, None] * seg
    pred = (np.arctan2(r[:, 1] - bs.y, r[:, 0] - bs.x) + 0.5 * math.pi) % math.pi
    diffs = np.where(ok, _fold_diff(aod_meas, pred), 0.5 * math.pi)
    rng_bs = np.where(ok, np.hypot(r[:, 0] - bs.x, r[:, 1] - bs.y), np.inf)
    return diffs, rng_bs, np.where(ok, tau, 1.0)


_MAX_FIXES = 24  # observation arc kept per track for the batch re-solve


def _refine_position(start: Vec2, fixes: np.ndarray, kind: str,
                     pa_pos: Optional[Vec2], sigma_angle: float
                     ) -> Optional[Vec2]:
    """Re-solve an anchor position over its whole observation arc.

    A particle cloud, once collapsed, sits inside the flat top of every later
    bearing likelihood and can no longer average new fixes — its range stays
    wherever the first few noisy fixes put it.  A least-squares pass over all
    stored fixes has no such memory limit: quantisation noise averages out
    and the arc's parallax constrains range directly.  Gauss-Newton with
    Huber weights (stray fixes from a mis-association or a bad UE step must
    not drag the solution), numeric Jacobian; None when it fails to stay
    local."""
    ue = fixes[:, 0:2]
    s_ue = fixes[:, 2]
    aoa = fixes[:, 3]
    aod = fixes[:, 4]
    use_aod = kind == "VA" and pa_pos is not None

    def residuals(p: np.ndarray) -> np.ndarray:
        d = np.hypot(p[0] - ue[:, 0], p[1] - ue[:, 1])
        sig = np.hypot(sigma_angle, s_ue / np.maximum(d, 1.0))
        th = (np.arctan2(p[1] - ue[:, 1], p[0] - ue[:, 0]) + 0.5 * math.pi) \
            % math.pi
        r = _fold_diff(aoa, th) / sig
        if use_aod:
            dd, rng_bs, tau = _aod_diffs(pa_pos, p[None, :], ue, aod)
            ok = np.isfinite(rng_bs)
            sig_d = np.hypot(sigma_angle,
                             tau * s_ue / np.maximum(rng_bs, 1e-9))
            r = np.concatenate([r, np.where(ok, dd, 0.0) / sig_d])
        a = np.abs(r)
        return r * np.where(a > 3.0, np.sqrt(3.0 / a), 1.0)

    p = np.array([start.x, start.y])
    eps = 1e-4
    for _ in range(3):
        r0 = residuals(p)
        jx = (residuals(p + [eps, 0.0]) - residuals(p - [eps, 0.0])) / (2 * eps)
        jy = (residuals(p + [0.0, eps]) - residuals(p - [0.0, eps])) / (2 * eps)
        h = np.array([[jx @ jx + 1e-9, jx @ jy],
                      [jx @ jy, jy @ jy + 1e-9]])
        g = np.array([jx @ r0, jy @ r0])
        try:
            step = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            return None
        norm = float(np.hypot(step[0], step[1]))
        if norm > 2.0:
            step = step * (2.0 / norm)
        p = p - step
    if not np.isfinite(p).all() or math.hypot(p[0] - start.x,
                                              p[1] - start.y) > 5.0:
        return None
    return Vec2(float(p[0]), float(p[1]))


def _reweight(cloud: ParticleCloud, diffs: np.ndarray, sigma: float, clutter: float):
    """Gaussian bearing likelihood with a clutter floor; None on total underflow."""
    lik = np.exp(-0.5 * (diffs / sigma) ** 2) + clutter
    w = cloud.weights * lik
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        return None
    return ParticleCloud(cloud.positions, w / total)


def _support(cloud: ParticleCloud, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """A <=k-point weighted quantile sketch of a cloud (deterministic)."""
    if cloud.n <= k:
        return cloud.positions, cloud.weights
    cum = np.cumsum(cloud.weights)
    idx = np.searchsorted(cum, (np.arange(k) + 0.5) / k)
    return cloud.positions[np.minimum(idx, cloud.n - 1)], np.full(k, 1.0 / k)


def _marginal_bearing_lik(u_xy: np.ndarray, a_xy: np.ndarray, a_w: np.ndarray,
                          aoa_meas: float, sigma: float) -> np.ndarray:
    """Arrival-bearing likelihood of each UE hypothesis, with the anchor's
    own position uncertainty integrated out over its particle sketch.

    Against a point mean this collapses to the usual Gaussian; against a
    still-raylike cloud it stays honestly flat instead of pretending the
    mid-ray average is a place."""
    dx = a_xy[None, :, 0] - u_xy[:, None, 0]
    dy = a_xy[None, :, 1] - u_xy[:, None, 1]
    th = (np.arctan2(dy, dx) + 0.5 * math.pi) % math.pi
    z = _fold_diff(aoa_meas, th) / sigma
    return _peaked(z) @ a_w


def _peaked(z: np.ndarray) -> np.ndarray:
    """Bearing likelihood kernel: a sharp core plus a faint wide shoulder.

    The shoulder keeps a usable gradient when the whole cloud sits several
    sigma off (a bad dead-reckoning step); a pure Gaussian goes flat there
    and the update degenerates to the clutter floor."""
    return np.exp(-0.5 * z * z) + 0.03 * np.exp(-z * z / 72.0)


def _marginal_departure_lik(bs: Vec2, u_xy: np.ndarray, a_xy: np.ndarray,
                            a_w: np.ndarray, aod_meas: float,
                            sigma: float) -> np.ndarray:
    """Departure-bearing likelihood of each UE hypothesis, anchor cloud
    integrated out.  Pairs with no physical wall crossing cannot have
    produced the path and contribute nothing."""
    b = np.array([bs.x, bs.y])
    n = a_xy - b                                        # (Na, 2)
    nn = np.einsum("ij,ij->i", n, n)                    # (Na,)
    seg = u_xy[:, None, :] - a_xy[None, :, :]           # (Nu, Na, 2)
    den = np.einsum("uaj,aj->ua", seg, n)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(np.abs(den) > 1e-12, -0.5 * nn / den, np.nan)
    ok = np.isfinite(tau) & (tau > 0.0) & (tau < 1.0) & (nn > 1e-12)
    tau = np.where(ok, tau, 0.5)
    r = a_xy[None, :, :] + tau[..., None] * seg
    pred = (np.arctan2(r[..., 1] - bs.y, r[..., 0] - bs.x) + 0.5 * math.pi) % math.pi
    z = _fold_diff(aod_meas, pred) / sigma
    return np.where(ok, _peaked(z), 0.0) @ a_w


def _cone(spread_m: float, distance: float) -> float:
    """One-sigma bearing half-cone of a cloud of radial spread seen at range."""
    if distance <= 1e-9:
        return math.pi
    return 2.0 * math.asin(min(spread_m / distance, 1.0))


def _perp_spread(cloud: ParticleCloud, theta: float) -> float:
    """Cloud spread perpendicular to a measured bearing line.

    Only displacement across the line moves bearings seen along it, so this
    (not the scalar radius) is the smear a cloud contributes to an angle
    likelihood.  `theta` uses the folded bearing convention.
    """
    alpha = theta - 0.5 * math.pi
    px, py = -math.sin(alpha), math.cos(alpha)
    m = cloud.weights @ cloud.positions
    proj = (cloud.positions[:, 0] - m[0]) * px + (cloud.positions[:, 1] - m[1]) * py
    mu = float(cloud.weights @ proj)
    return float(math.sqrt(max(cloud.weights @ (proj - mu) ** 2, 0.0)))


def _maybe_resample(cloud: ParticleCloud, cfg: SlamConfig,
                    rng: np.random.Generator) -> ParticleCloud:
    if cloud.ess() >= cfg.resample_threshold * cloud.n:
        return cloud
    idx = systematic_resample(cloud.weights, rng)
    pos = cloud.positions[idx]
    if cfg.roughening > 0:
        pos = pos + rng.normal(0.0, cfg.roughening, pos.shape)
    return ParticleCloud.uniform(pos)


def _anchor_bearing(anchor: AnchorTrack, ue_mean: Vec2) -> Tuple[float, float]:
    """Predicted arrival bearing of an anchor cloud seen from the UE mean.

    Circular statistics over the particles: a freshly born ray cloud (both
    lobes, huge positional spread) still has a sharp folded bearing, so
    association works from the first step, while the growing parallax of a
    cloud spread in range shows up as bearing std.
    """
    return _circ_stats(_bearings_to(ue_mean, anchor.cloud.positions),
                       anchor.cloud.weights)


def _associate(anchors: Sequence[AnchorTrack], ests: Sequence[PathEstimate],
               ue_cloud: ParticleCloud, ue_mean: Vec2, cfg: SlamConfig):
    """Match each measurement to its nearest in-gate anchor, strongest first.

    The predicted bearing is the circular mean over the anchor's particles
    (well defined even for a fresh ray cloud) and the gate widens with the
    particles' bearing spread plus the cone the UE's own cross-line spread
    subtends at the anchor's typical range — while the UE is poorly
    predicted across that line, every bearing it measures is off by that
    much, while spread along it moves nothing.  Tightly localized anchors
    must also agree in AoD where one can be predicted.  Several
    measurements may pick the same anchor — sweeping often lands twice next
    to a strong path — and only the strongest of them updates it; the
    repeats are absorbed rather than left to spawn spurious birth
    candidates on the same ray.
    """
    pa_mean = next((t.mean for t in anchors if t.kind == "PA"), None)
    matches: dict[int, PathEstimate] = {}
    unmatched: List[PathEstimate] = []
    order = sorted(ests, key=lambda e: -abs(e.gain_hat))
    stats = []
    for t in anchors:
        if t.retired:
            stats.append(None)
            continue
        mu, spread = _anchor_bearing(t, ue_mean)
        d_typ = float(np.median(np.hypot(t.cloud.positions[:, 0] - ue_mean.x,
                                         t.cloud.positions[:, 1] - ue_mean.y)))
        if t.kind != "PA" and d_typ > cfg.birth_range[1]:
            # drifted beyond any range a real reflection could have; let it
            # miss its way into retirement instead of absorbing measurements
            stats.append(None)
            continue
        gate = max(cfg.base_gate,
                   3.0 * math.hypot(spread, _cone(_perp_spread(ue_cloud, mu),
                                                  d_typ)))
        stats.append((mu, spread, gate))
    for est in order:
        best, best_diff = None, math.inf
        for i, t in enumerate(anchors):
            if stats[i] is None:
                continue
            mu, spread, gate = stats[i]
            diff = abs(float(_fold_diff(est.aoa_hat, mu)))
            if diff > gate or diff >= best_diff:
                continue
            if spread <= cfg.base_gate:
                if t.kind == "PA":
                    if abs(float(_fold_diff(est.aod_hat,
                                            bearing(t.mean, ue_mean)))) > gate:
                        continue
                elif pa_mean is not None:
                    # a settled mirror predicts a departure bearing too; if
                    # the geometry admits no reflection toward the UE at all
                    # the check is mute (the estimated UE may just be off)
                    hit = _bisector_hit(pa_mean, t.mean, ue_mean)
                    if hit is not None and abs(float(_fold_diff(
                            est.aod_hat, bearing(pa_mean, hit)))) > gate:
                        continue
            best, best_diff = i, diff
        if best is None:
            unmatched.append(est)
        elif best not in matches:
            matches[best] = est
    return matches, unmatched


def _born_cloud(est: PathEstimate, ue_mean: Vec2, cfg: SlamConfig,
                rng: np.random.Generator,
                d_floor: float = 0.0) -> ParticleCloud:
    """Candidate particles along both lobes of the measured arrival bearing.

    A folded bearing names a line, not a half-line; the wrong lobe dies by
    triangulation as the UE moves.  `d_floor` raises the near end of the
    range: a reflected path is never shorter than the direct one, so no
    anchor can sit closer than the PA does.
    """
    d_min, d_max = cfg.birth_range
    d_min = min(max(d_min, d_floor), 0.9 * d_max)
    n = cfg.n_particles
    alpha = est.aoa_hat - 0.5 * math.pi  # back to atan2 convention
    direction = np.array([math.cos(alpha), math.sin(alpha)])
    perp = np.array([-direction[1], direction[0]])
    dists = rng.uniform(d_min, d_max, n)
    signs = np.where(np.arange(n) < n // 2, 1.0, -1.0)
    lateral = rng.normal(0.0, 1.0, n) * dists * cfg.sigma_angle
    pos = (
        np.array([ue_mean.x, ue_mean.y])
        + (signs * dists)[:, None] * direction
        + lateral[:, None] * perp
    )
    return ParticleCloud.uniform(pos)


def slam_step(radio_map: RadioMap, x_pred: Vec2, v_pred: Vec2,
              estimates: PathEstimateSet, cfg: SlamConfig) -> RadioMap:
    """Advance the map by one observation step.

    Predict, associate, reweight, resample, give birth, retire: the order
    matters only in that association uses the predicted UE mean and the
    previous anchor means, so a step is a pure function of (map, inputs).
    """
    rng = radio_map.rng
    step = radio_map.step + 1
    resets = radio_map.weight_resets
    prev_estimate = radio_map.ue_estimate

    # predict: carry the cloud to the predicted position, spread by process
    # noise.  The noise stays at its small floor while the filter is locked:
    # the cloud's radial shape is the filter's memory of every past bearing,
    # and range is only resolvable by holding those hypotheses fixed while the
    # geometry rotates.  The dead-reckoning step differences successive
    # position estimates, so any correction the last update made comes back
    # roughly doubled in this prediction — the size of that correction is the
    # honest scale of the prediction error, and the spread grows to cover it.
    pred_scale = max(cfg.process_noise, min(radio_map.pred_gap, 5.0))
    if radio_map.step < 2:
        # dead reckoning has no velocity history yet and simply repeats the
        # last position, so the first strides arrive unannounced
        pred_scale = max(pred_scale, cfg.coldstart_spread)
    shift = np.array([x_pred.x - prev_estimate.x, x_pred.y - prev_estimate.y])
    ue_pos = radio_map.ue.positions + shift + rng.normal(
        0.0, pred_scale, radio_map.ue.positions.shape
    )
    ue_cloud = ParticleCloud(ue_pos, radio_map.ue.weights)
    ue_mean = ue_cloud.mean()

    # retire anchors that have gone unseen too long (kept in the map)
    anchors = [
        replace(t, retired=True)
        if not t.pinned and not t.retired and step - 1 - t.last_seen >= cfg.retire_misses
        else t
        for t in radio_map.anchors
    ]

    matches, unmatched = _associate(anchors, estimates.estimates, ue_cloud,
                                    ue_mean, cfg)

    # divergence recovery: an innovation beyond what the clouds' spread can
    # explain means the UE cloud got overconfident around a wrong mean
    # (every bearing it predicts is then off together) — whether or not the
    # association gate still caught the measurement.  Re-spread across the
    # offending anchor's line to cover the innovation — never along it,
    # which would erase the cloud's accumulated range knowledge — and
    # associate once more.  Each settled anchor contributes its own cross
    # direction, so together the kicks reach any error the map can see.
    pa_idx = next((i for i, t in enumerate(anchors)
                   if t.kind == "PA" and not t.retired), None)
    pa_misses = 0
    if pa_idx is not None and pa_idx not in matches:
        pa_misses = radio_map.pa_misses + 1
    kicked = False
    if estimates.estimates:
        for i, t in enumerate(anchors):
            if t.retired or not (t.pinned or t.localized):
                continue
            mu, b_spread = _anchor_bearing(t, ue_mean)
            if i in matches:
                dmin = abs(float(_fold_diff(matches[i].aoa_hat, mu)))
            else:
                # one silent step can be fading; two in a row says the
                # prediction is inconsistent with what is being measured
                if t.kind == "PA":
                    if pa_misses < 2:
                        continue
                elif t.last_seen >= step - 1:
                    continue
                dmin = min(abs(float(_fold_diff(e.aoa_hat, mu)))
                           for e in estimates.estimates)
                if t.kind != "PA" and dmin > 0.3:
                    # nothing anywhere near this anchor's line: its path is
                    # simply absent, which says nothing about the UE
                    continue
            d_t = float(np.median(np.hypot(t.cloud.positions[:, 0] - ue_mean.x,
                                           t.cloud.positions[:, 1] - ue_mean.y)))
            # innovation the regular updates can already absorb: the
            # anchor's own bearing spread plus the UE cloud's transverse
            # footprint at that range
            support = math.hypot(b_spread,
                                 _perp_spread(ue_cloud, mu) / max(d_t, 1e-9),
                                 cfg.sigma_angle)
            boost = min(d_t * dmin, 5.0)
            if dmin > 3.0 * support and boost > cfg.process_noise:
                alpha = mu - 0.5 * math.pi
                perp = np.array([-math.sin(alpha), math.cos(alpha)])
                kick = rng.normal(0.0, boost, ue_cloud.n)
                ue_cloud = ParticleCloud(
                    ue_cloud.positions + kick[:, None] * perp,
                    ue_cloud.weights)
                ue_mean = ue_cloud.mean()
                resets += 1
                kicked = True
        if kicked:
            matches, unmatched = _associate(anchors, estimates.estimates,
                                            ue_cloud, ue_mean, cfg)
            if pa_idx is not None and pa_idx in matches:
                pa_misses = 0

    # a trusted PA position lets NLoS updates use the departure bearing too
    pa_pos: Optional[Vec2] = None
    if pa_idx is not None and (anchors[pa_idx].pinned or anchors[pa_idx].localized):
        pa_pos = anchors[pa_idx].mean

    # anchor updates against the UE mean
    updated: List[AnchorTrack] = []
    rejected: List[PathEstimate] = []
    rejected_idx: set = set()
    for i, t in enumerate(anchors):
        est = matches.get(i)
        if est is None:
            updated.append(t if t.confirmed else replace(t, hits=0))
            continue
        cloud = t.cloud
        if not t.pinned:
            # the UE's spread across the measured ray smears each particle's
            # bearing by the cone it subtends at that particle's range
            vertex = _perp_spread(ue_cloud, est.aoa_hat)
            d = np.hypot(cloud.positions[:, 0] - ue_mean.x,
                         cloud.positions[:, 1] - ue_mean.y)
            cones = np.arcsin(np.minimum(vertex / np.maximum(d, 1e-9), 1.0))
            sigma = np.hypot(cfg.sigma_angle, cones)
            diffs = _fold_diff(est.aoa_hat, _bearings_to(ue_mean, cloud.positions))
            rew = _reweight(cloud, diffs, sigma, cfg.clutter)
            if rew is not None and t.kind == "VA" and pa_pos is not None:
                # the departure bearing pins each hypothesis' range to the
                # BS; without it the cloud can only collapse across the ray
                dep, rng_bs, tau = _aod_diffs(pa_pos, cloud.positions,
                                              np.array([[ue_mean.x, ue_mean.y]]),
                                              est.aod_hat)
                possible = np.isfinite(rng_bs)
                if float(rew.weights @ possible) < 0.05:
                    # nearly no surviving hypothesis can reflect anything
                    # toward the UE: the assignment was wrong, give the
                    # measurement back and let the track miss
                    updated.append(t if t.confirmed else replace(t, hits=0))
                    rejected.append(est)
                    rejected_idx.add(i)
                    continue
                cones_d = tau * vertex / np.maximum(rng_bs, 1e-9)
                # a young track's range must not lock onto a single noisy
                # departure fix: once the cloud collapses, later likelihoods
                # are flat across it and can no longer move it, so the first
                # few fixes are blended at reduced sharpness instead
                soften = max(1.0, 3.0 - t.hits)
                rew = _reweight(rew, dep,
                                np.hypot(soften * cfg.sigma_angle, cones_d),
                                cfg.clutter)
            if rew is None:
                resets += 1
                rew = ParticleCloud.uniform(cloud.positions)
            cloud = _maybe_resample(rew, cfg, rng)
        hits = t.hits + 1
        fixes = t.fixes
        if not t.pinned:
            fixes = (fixes + ((ue_mean.x, ue_mean.y, ue_cloud.sigma_r(),
                               est.aoa_hat, est.aod_hat),))[-_MAX_FIXES:]
            if len(fixes) >= 5:
                sol = _refine_position(cloud.mean(), np.asarray(fixes),
                                       t.kind, pa_pos, cfg.sigma_angle)
                if sol is not None:
                    mu = cloud.weights @ cloud.positions
                    cloud = ParticleCloud(
                        cloud.positions
                        + (np.array([sol.x, sol.y]) - mu)[None, :],
                        cloud.weights)
        updated.append(replace(
            t, cloud=cloud, last_seen=step, hits=hits, fixes=fixes,
            confirmed=t.confirmed or hits >= cfg.confirm_hits,
            localized=t.pinned or cloud.sigma_r() <= cfg.confirm_spread,
            last_gain=float(abs(est.gain_hat)),
        ))

    # UE update against matched, confirmed anchors, marginalizing over each
    # anchor's own cloud: a fat anchor then pulls weakly by construction,
    # and NLoS departure bearings supply the along-ray (range) information
    # that arrival bearings lack
    for i, est in matches.items():
        if i in rejected_idx:
            continue
        t = updated[i]
        if not t.confirmed:
            continue
        pts, wts = _support(t.cloud, 256)
        lik = _marginal_bearing_lik(ue_cloud.positions, pts, wts,
                                    est.aoa_hat, cfg.sigma_angle)
        if t.kind == "VA" and pa_pos is not None:
            lik = lik * _marginal_departure_lik(pa_pos, ue_cloud.positions,
                                                pts, wts, est.aod_hat,
                                                cfg.sigma_angle)
        w = ue_cloud.weights * (lik + cfg.clutter)
        total = w.sum()
        if not np.isfinite(total) or total <= 0.0:
            resets += 1
            ue_cloud = ParticleCloud.uniform(ue_cloud.positions)
        else:
            ue_cloud = ParticleCloud(ue_cloud.positions, w / total)
    ue_cloud = _maybe_resample(ue_cloud, cfg, rng)

    # births from unmatched measurements; the strongest may claim a missing
    # PA.  Reflections travel farther than the direct path, so VA candidates
    # start no closer than the PA currently is (with slack for UE error).
    # No births while the direct path is unaccounted for or a kick just
    # fired: rays drawn from a suspect UE only seed ghosts.
    if kicked or (pa_idx is not None and pa_misses > 0):
        unmatched, rejected = [], []
    have_pa = any(t.kind == "PA" for t in updated)
    pa_now = next((t for t in updated if t.kind == "PA" and not t.retired), None)
    d_floor = 0.0
    if pa_now is not None:
        d_floor = 0.9 * float(np.median(
            np.hypot(pa_now.cloud.positions[:, 0] - ue_mean.x,
                     pa_now.cloud.positions[:, 1] - ue_mean.y)))
    # ...and no births hugging a live track's line: sweep sidelobes repeat a
    # strong path a few grid bins off its ray, and any candidate planted
    # there would compete with the track that already owns the path.  The
    # direct path's ray gets one exception — a reflector whose image stands
    # almost behind the BS produces a legitimate path only a few bins off the
    # direct bearing, and it arrives near full strength, whereas sidelobe
    # leakage is well over an order of magnitude down.  Strong candidates may
    # therefore birth through the direct ray's guard (never through a VA's).
    guard = max(cfg.base_gate, min(4.0 * cfg.base_gate, 0.15))
    g0 = max((float(abs(e.gain_hat)) for e in estimates.estimates),
             default=0.0)
    taken = [(_anchor_bearing(t, ue_mean)[0], t.kind == "PA")
             for t in updated if not t.retired]
    for est in unmatched + rejected:
        strong = float(abs(est.gain_hat)) >= 0.25 * g0
        if any(abs(float(_fold_diff(est.aoa_hat, mu))) < guard
               and not (is_pa and strong)
               for mu, is_pa in taken):
            continue
        kind = "VA" if have_pa else "PA"
        born = _born_cloud(est, ue_mean, cfg, rng,
                           d_floor if kind == "VA" else 0.0)
        have_pa = True
        taken.append((est.aoa_hat, kind == "PA"))
        updated.append(AnchorTrack(
            born, kind, last_seen=step,
            confirmed=False, hits=0, last_gain=float(abs(est.gain_hat)),
        ))

    post = ue_cloud.mean()
    gap = math.hypot(post.x - x_pred.x, post.y - x_pred.y)
    return RadioMap(ue_cloud, tuple(updated), prev_estimate, v_pred, step, rng,
                    resets, pa_misses, gap)


def map_estimate(radio_map: RadioMap) -> Tuple[Vec2, List[Vec2]]:
    """Weighted cloud means; only confirmed, localized, in-track anchors are
    reported — a cloud still spread along its birth ray has no meaningful
    point position, and a retired track is a stale hypothesis, not belief."""
    return radio_map.ue_estimate, [
        t.mean for t in radio_map.anchors
        if t.confirmed and t.localized and not t.retired]
