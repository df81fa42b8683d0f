"""Experiment orchestration: the full per-step loop (truth -> beam management
-> IMU -> prediction -> map update -> metrics) over seeds and SNR points,
trace/CSV emission, and switching detection rates.

Three run modes:
  proposed          - prior-aided tracking with IMU-aided prediction
  hierarchical_only - full sweep every step (no priors)
  no_imu            - prediction replaced by the previous position estimate
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields as dc_fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .beam import (PriorAngleInfo, SweepConfig, SwitchState, SwitchThresholds,
                   partial_channel, run_beam_management, transform_priors)
from .channel import ArrayConfig, NoiseModel, assemble_channel
from .codebook import AngularGrid, HierarchicalCodebook, beam_pattern, build_hierarchical
from .geometry import Vec2
from .metrics import (MetricConfig, angle_error, nmse, ospa, overhead,
                      se_imperfect, se_perfect, ue_error)
from .scenario import (ScenarioSpec, generate_truth, load_scenario,
                       scenario_anchors, scenario_from_dict)
from .sensing import RadioMap, SlamConfig, imu_sample, map_estimate, predict_ue, slam_step

__all__ = [
    "ConfigError",
    "RunConfig",
    "StepRecord",
    "RunOutput",
    "run_experiment",
    "detection_rates",
    "load_run_config",
    "run_config_from_dict",
]

MODES = ("proposed", "hierarchical_only", "no_imu")

# independent substream tags per consumer of randomness
_NOISE_TAG, _IMU_TAG, _SLAM_TAG, _PILOT_TAG = 23, 29, 31, 37

STEP_FIELDS = ("step", "mode_used", "measurement_count", "t_bm_s", "e_angle",
               "e_ue", "ospa", "nmse", "se_p", "se_ip", "l_true", "l_hat",
               "d_flag")
_MEAN_FIELDS = ("e_angle", "e_ue", "ospa", "nmse", "se_p", "se_ip",
                "measurement_count", "t_bm_s")


class ConfigError(ValueError):
    """Bad run/scenario configuration (as opposed to a runtime failure)."""


@dataclass(frozen=True)
class StepRecord:
    step: int
    mode_used: str
    measurement_count: int
    t_bm_s: float
    e_angle: float
    e_ue: float
    ospa: float
    nmse: float
    se_p: float
    se_ip: float
    l_true: int
    l_hat: int
    d_flag: bool

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in STEP_FIELDS}


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioSpec
    seeds: Tuple[int, ...] = (1,)
    snr_sweep: Optional[Tuple[float, ...]] = None  # None -> scenario's snr_db
    mode: str = "proposed"
    output_dir: Optional[Path] = None  # None -> no files written
    thresholds: SwitchThresholds = SwitchThresholds()
    slam: Optional[SlamConfig] = None  # None -> scenario-sized (_slam_defaults)
    metrics: MetricConfig = MetricConfig()
    imu_sigma: float = 0.02
    coverage_factor: float = 3.27  # cloud-spread -> angle-window multiplier
    ue_init_spread: float = 1.0  # initial UE cloud std (m)
    snr_reference: str = "layer1"  # layer1 | matched
    noiseless: bool = False
    sweep_l_max: int = 8
    gain_refine_reps: int = 8
    fixed_path_count: Optional[int] = None
    r_min: Optional[float] = None  # explicit probe thresholds beat 3-sigma
    delta_r_min: Optional[float] = None
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.snr_reference not in ("layer1", "matched"):
            raise ConfigError("snr_reference must be 'layer1' or 'matched'")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.imu_sigma < 0 or self.coverage_factor <= 0:
            raise ConfigError("imu_sigma >= 0 and coverage_factor > 0 required")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def snr_points(self) -> Tuple[float, ...]:
        return self.snr_sweep if self.snr_sweep else (self.scenario.snr_db,)


@dataclass(frozen=True)
class RunOutput:
    records: Dict[Tuple[float, int], Tuple[StepRecord, ...]]  # (snr, seed)
    summary: Tuple[dict, ...]  # one row per (snr, mode)
    files: Tuple[Path, ...]


def _layer1_reference(grid: AngularGrid, bs_cfg: ArrayConfig,
                      ue_cfg: ArrayConfig, cb_bs: HierarchicalCodebook,
                      cb_ue: HierarchicalCodebook) -> float:
    """RMS in-band amplitude of the widest (layer-1) beam pair: the SNR
    anchor that keeps first-layer decisions at the nominal operating point."""
    def rms(cfg, cb):
        beam = cb.subset(1, 1)[0]
        amps = beam_pattern(cfg, grid, beam)
        half = grid.n_bins // 2
        return math.sqrt(float(np.mean(amps[:half] ** 2)))

    return rms(bs_cfg, cb_bs) * rms(ue_cfg, cb_ue)


def _strongest_gain(spec: ScenarioSpec, seed: int) -> float:
    """Strongest path magnitude at the first step that has any path."""
    for t in range(spec.n_steps):
        truth = generate_truth(spec, t, seed)
        if truth.l_true:
            return max(abs(p.gain) for _, p in truth.paths)
    return 1.0


def _slam_defaults(spec: ScenarioSpec, imu_sigma: float,
                   ue_init_spread: float) -> SlamConfig:
    """Size the filter to the scenario: the bearing likelihood should match
    the sweep's one-bin angle errors, the prediction jitter the IMU-driven
    position uncertainty (sigma_IMU*dt^2/2) over a small floor, and anchor
    births stay within the scene — a mirrored BS can sit at most one scene
    diameter beyond it, while a candidate collapsing far outside is a ghost
    that would otherwise match slowly-turning bearings forever.  Until the
    dead reckoner has two positions it cannot announce the walk's first
    strides, so prediction uncertainty starts at the initial-position scale."""
    pts = [spec.bs] + [p for w in spec.walls for p in (w.a, w.b)]
    diameter = max((a.dist(b) for a in pts for b in pts), default=10.0)
    return SlamConfig(
        sigma_angle=math.pi / spec.n_grid,
        process_noise=0.1 + 0.5 * imu_sigma * spec.dt ** 2,
        birth_range=(1.0, max(10.0, 1.5 * diameter)),
        coldstart_spread=ue_init_spread,
    )


def _sweep_cfg(cfg: RunConfig, sigma: float) -> SweepConfig:
    kw = dict(l_max=cfg.sweep_l_max, gain_refine_reps=cfg.gain_refine_reps,
              fixed_path_count=cfg.fixed_path_count)
    if cfg.r_min is not None:
        return SweepConfig(r_min=cfg.r_min,
                           delta_r_min=cfg.delta_r_min or cfg.r_min, **kw)
    return SweepConfig.for_sigma(sigma, **kw)


def _safe_se_perfect(h: np.ndarray, sigma: float) -> float:
    if sigma <= 0.0:
        return float("nan")  # noiseless rate is unbounded
    if np.linalg.norm(h) <= 0.0:
        return 0.0
    return se_perfect(h, sigma)


def _run_single(cfg: RunConfig, snr_db: float, seed: int
                ) -> Tuple[List[StepRecord], List[dict]]:
    """One full trajectory for one (snr, seed): pure given its arguments."""
    spec = cfg.scenario
    grid = AngularGrid(spec.n_grid)
    bs_cfg = ArrayConfig(spec.arrays[0], "BS")
    ue_cfg = ArrayConfig(spec.arrays[1], "UE")
    cb_bs = build_hierarchical(bs_cfg, grid)
    cb_ue = build_hierarchical(ue_cfg, grid)

    if cfg.noiseless:
        sigma = 0.0
    else:
        a_ref = (1.0 if cfg.snr_reference == "matched" else
                 _layer1_reference(grid, bs_cfg, ue_cfg, cb_bs, cb_ue))
        sigma = _strongest_gain(spec, seed) * a_ref / 10.0 ** (snr_db / 20.0)
    sweep_cfg = _sweep_cfg(cfg, sigma)
    noise = NoiseModel(sigma, seed=np.random.SeedSequence(
        [seed, _NOISE_TAG, int(round(snr_db * 1000))]))
    rng_imu = np.random.default_rng(np.random.SeedSequence([seed, _IMU_TAG]))
    rng_slam = np.random.default_rng(np.random.SeedSequence([seed, _SLAM_TAG]))
    rng_pilot = np.random.default_rng(np.random.SeedSequence([seed, _PILOT_TAG]))

    slam_cfg = cfg.slam if cfg.slam is not None else _slam_defaults(
        spec, cfg.imu_sigma, cfg.ue_init_spread)
    truth0 = generate_truth(spec, 0, seed)
    radio_map = RadioMap.create(slam_cfg, rng_slam, truth0.ue.position,
                                cfg.ue_init_spread,
                                known_bs=spec.bs if spec.known_bs else None)
    state = SwitchState(thresholds=cfg.thresholds)
    anchors_true = [a.position for a in scenario_anchors(spec)]
    x_est: List[Vec2] = []
    imu_hist = []
    records: List[StepRecord] = []
    trace: List[dict] = []

    for t in range(spec.n_steps):
        truth = generate_truth(spec, t, seed)
        h = assemble_channel([p for _, p in truth.paths], bs_cfg, ue_cfg)

        if t == 0:
            x_pred, v_pred = truth0.ue.position, Vec2(0.0, 0.0)
        elif cfg.mode == "no_imu":
            x_pred, v_pred = predict_ue(x_est[-1], None, None, None, spec.dt)
        else:
            x_pred, v_pred = predict_ue(
                x_est[-1], x_est[-2] if t >= 2 else None,
                imu_hist[-1], imu_hist[-2] if t >= 2 else None, spec.dt)

        if cfg.mode == "hierarchical_only" or t < spec.init_sweep_steps:
            priors: Optional[PriorAngleInfo] = None
        else:
            priors = transform_priors(radio_map.snapshot(), x_pred,
                                      cfg.coverage_factor, grid)

        result = run_beam_management(h, cb_bs, cb_ue, priors, noise,
                                     sweep_cfg, state)
        state = result.state

        imu_hist.append(imu_sample(truth.ue.acceleration, cfg.imu_sigma, rng_imu))
        radio_map = slam_step(radio_map, x_pred, v_pred, result.estimates,
                              slam_cfg)
        ue_est, anchors_est = map_estimate(radio_map)
        x_est.append(ue_est)

        truth_angles = [(p.aoa, p.aod) for _, p in truth.paths]
        est_angles = [(e.aoa_hat, e.aod_hat) for e in result.estimates.estimates]
        e_angle = (0.0 if not truth_angles and not est_angles else
                   angle_error(truth_angles, est_angles, cfg.metrics.c_angle))
        h_hat = partial_channel(result.estimates, bs_cfg, ue_cfg)
        if np.linalg.norm(h) > 0.0:
            step_nmse = nmse(h, h_hat)
        else:
            step_nmse = 0.0 if np.linalg.norm(h_hat) == 0.0 else float("nan")
        layer_comp = result.measurement_count - result.estimates.probe_measurements
        t_bm_s, count = overhead(result.mode,
                                 (layer_comp, result.estimates.probe_measurements),
                                 result.estimates.l_hat, spec.t_b)
        se_p = _safe_se_perfect(h, sigma)
        if sigma <= 0.0:
            se_ip = float("nan")
        elif np.linalg.norm(h) == 0.0 and np.linalg.norm(h_hat) == 0.0:
            se_ip = 0.0
        else:
            se_ip = se_imperfect(h, h_hat, sigma, t_bm=t_bm_s,
                                 frame_t=cfg.metrics.frame_t,
                                 est_reps=cfg.metrics.est_reps, rng=rng_pilot)

        rec = StepRecord(
            step=t, mode_used=result.mode, measurement_count=count,
            t_bm_s=t_bm_s, e_angle=e_angle,
            e_ue=ue_error(truth.ue.position, ue_est),
            ospa=ospa(anchors_true, anchors_est, cfg.metrics.c_map),
            nmse=step_nmse, se_p=se_p, se_ip=se_ip,
            l_true=truth.l_true, l_hat=result.estimates.l_hat,
            d_flag=result.state.d_flag)
        records.append(rec)
        line = rec.as_dict()
        line.update(
            seed=seed, snr_db=snr_db, mode=cfg.mode,
            refine_measurements=result.estimates.refine_measurements,
            ue_true=[truth.ue.position.x, truth.ue.position.y],
            ue_est=[ue_est.x, ue_est.y],
            x_pred=[x_pred.x, x_pred.y],
            anchors_est=[[a.x, a.y] for a in anchors_est],
            anchors_true=[[a.x, a.y] for a in anchors_true])
        trace.append({k: _json_safe(v) for k, v in line.items()})
    return records, trace


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _nanmean(vals: Sequence[float]) -> float:
    a = np.asarray([float(v) for v in vals])
    good = a[np.isfinite(a)]
    return float(good.mean()) if good.size else float("nan")


def _majority(items: Sequence[str]) -> str:
    counts = Counter(items)
    top = max(counts.values())
    return sorted(k for k, c in counts.items() if c == top)[0]


def _pool_args(cfg: RunConfig):
    for snr in cfg.snr_points:
        for seed in cfg.seeds:
            yield snr, seed


def run_experiment(cfg: RunConfig) -> RunOutput:
    """All (snr, seed) runs for cfg.mode; optionally writes trace/CSV files."""
    jobs = list(_pool_args(cfg))
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            outs = list(pool.map(_run_single, [cfg] * len(jobs),
                                 [j[0] for j in jobs], [j[1] for j in jobs]))
    else:
        outs = [_run_single(cfg, snr, seed) for snr, seed in jobs]
    records = {job: tuple(out[0]) for job, out in zip(jobs, outs)}
    traces = {job: out[1] for job, out in zip(jobs, outs)}

    summary = []
    for snr in cfg.snr_points:
        per_seed = [records[(snr, seed)] for seed in cfg.seeds]
        row = {"snr_db": snr, "mode": cfg.mode,
               "n_seeds": len(cfg.seeds), "n_steps": len(per_seed[0])}
        for f in _MEAN_FIELDS:
            row[f] = _nanmean([getattr(r, f) for recs in per_seed for r in recs])
        summary.append(row)

    files: List[Path] = []
    if cfg.output_dir is not None:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        for (snr, seed), lines in sorted(traces.items()):
            p = out / f"trace_snr{snr:g}_{cfg.mode}_seed{seed}.jsonl"
            p.write_text("".join(json.dumps(ln, sort_keys=True) + "\n"
                                 for ln in lines))
            files.append(p)
        for snr in cfg.snr_points:
            p = out / f"steps_snr{snr:g}_{cfg.mode}.csv"
            _write_steps_csv(p, [records[(snr, s)] for s in cfg.seeds])
            files.append(p)
        p = out / "summary.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            cols = ["snr_db", "mode", "n_seeds", "n_steps", *_MEAN_FIELDS]
            w.writerow(cols)
            for row in summary:
                w.writerow([_fmt(row[c]) for c in cols])
        files.append(p)
    return RunOutput(records, tuple(summary), tuple(files))


def _write_steps_csv(path: Path, per_seed: Sequence[Sequence[StepRecord]]) -> None:
    """Per-step rows averaged across seeds; categorical fields take the
    majority value, d_flag becomes the flagged fraction."""
    n_steps = len(per_seed[0])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STEP_FIELDS)
        for t in range(n_steps):
            at_t = [recs[t] for recs in per_seed]
            row = []
            for f in STEP_FIELDS:
                vals = [getattr(r, f) for r in at_t]
                if f == "step":
                    row.append(str(t))
                elif f == "mode_used":
                    row.append(_majority(vals))
                elif f == "d_flag":
                    row.append(_fmt(float(np.mean([bool(v) for v in vals]))))
                elif f in ("l_true", "l_hat", "measurement_count"):
                    row.append(_fmt(float(np.mean(vals))))
                else:
                    row.append(_fmt(_nanmean(vals)))
            w.writerow(row)


def detection_rates(cfg: RunConfig, snr_db: Optional[float] = None
                    ) -> Tuple[float, float]:
    """Switch-detector quality against ground-truth path-set changes.

    A change step is one whose true path-id set differs from the previous
    step's; the detector fires when tracking trips a compensating sweep or
    the end-of-step flag is raised. Returns (success, false alarm) pooled
    over seeds; success is NaN when the scenario has no change steps.
    """
    snr = cfg.snr_points[0] if snr_db is None else snr_db
    spec = cfg.scenario
    hits = changes = alarms = quiet = 0
    for seed in cfg.seeds:
        records, _ = _run_single(cfg, snr, seed)
        prev_ids = None
        for t, rec in enumerate(records):
            ids = frozenset(
                g.anchor_index for g, _ in generate_truth(spec, t, seed).paths)
            if t >= 1:
                tripped = rec.mode_used == "track+sweep" or rec.d_flag
                if ids != prev_ids:
                    changes += 1
                    hits += tripped
                else:
                    quiet += 1
                    alarms += tripped
            prev_ids = ids
    success = hits / changes if changes else float("nan")
    false_alarm = alarms / quiet if quiet else float("nan")
    return success, false_alarm


# ---------------------------------------------------------------------------
# Run-config JSON (strict keys at every level)

_RUN_KEYS = {"scenario", "seeds", "snr_sweep", "mode", "output_dir", "overrides"}
_OVERRIDE_KEYS = {"sweep", "switch", "slam", "metrics", "imu_sigma",
                  "coverage_factor", "ue_init_spread", "snr_reference",
                  "noiseless", "workers"}
_SWEEP_KEYS = {"l_max", "gain_refine_reps", "fixed_path_count", "r_min",
               "delta_r_min"}


def _build(cls, d: dict, what: str):
    allowed = {f.name for f in dc_fields(cls)}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {what} fields: {sorted(unknown)}")
    return cls(**d)


def run_config_from_dict(d: dict, base_dir: Optional[Path] = None) -> RunConfig:
    unknown = set(d) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown run-config fields: {sorted(unknown)}")
    if "scenario" not in d:
        raise ConfigError("run config is missing 'scenario'")
    try:
        scn = d["scenario"]
        if isinstance(scn, str):
            p = Path(scn)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            spec = load_scenario(p)
        else:
            spec = scenario_from_dict(scn)
    except (OSError, json.JSONDecodeError, ValueError, TypeError) as e:
        raise ConfigError(f"bad scenario: {e}") from e

    kwargs: dict = {"scenario": spec}
    if "seeds" in d:
        kwargs["seeds"] = tuple(int(s) for s in d["seeds"])
    if d.get("snr_sweep") is not None:
        kwargs["snr_sweep"] = tuple(float(s) for s in d["snr_sweep"])
    if "mode" in d:
        kwargs["mode"] = str(d["mode"])
    if d.get("output_dir") is not None:
        kwargs["output_dir"] = Path(d["output_dir"])

    ov = dict(d.get("overrides", {}))
    unknown = set(ov) - _OVERRIDE_KEYS
    if unknown:
        raise ConfigError(f"unknown override fields: {sorted(unknown)}")
    try:
        if "switch" in ov:
            kwargs["thresholds"] = _build(SwitchThresholds, ov["switch"], "switch")
        if "slam" in ov:
            # partial overrides layer onto the scenario-sized defaults
            sl = dict(ov["slam"])
            unknown = set(sl) - {f.name for f in dc_fields(SlamConfig)}
            if unknown:
                raise ConfigError(f"unknown slam fields: {sorted(unknown)}")
            imu = float(ov.get("imu_sigma", RunConfig.imu_sigma))
            spread = float(ov.get("ue_init_spread", RunConfig.ue_init_spread))
            kwargs["slam"] = replace(_slam_defaults(spec, imu, spread), **sl)
        if "metrics" in ov:
            kwargs["metrics"] = _build(MetricConfig, ov["metrics"], "metrics")
        if "sweep" in ov:
            sw = dict(ov["sweep"])
            unknown = set(sw) - _SWEEP_KEYS
            if unknown:
                raise ConfigError(f"unknown sweep fields: {sorted(unknown)}")
            if "l_max" in sw:
                kwargs["sweep_l_max"] = int(sw["l_max"])
            if "gain_refine_reps" in sw:
                kwargs["gain_refine_reps"] = int(sw["gain_refine_reps"])
            if sw.get("fixed_path_count") is not None:
                kwargs["fixed_path_count"] = int(sw["fixed_path_count"])
            if sw.get("r_min") is not None:
                kwargs["r_min"] = float(sw["r_min"])
            if sw.get("delta_r_min") is not None:
                kwargs["delta_r_min"] = float(sw["delta_r_min"])
        for key in ("imu_sigma", "coverage_factor", "ue_init_spread"):
            if ov.get(key) is not None:
                kwargs[key] = float(ov[key])
        if "snr_reference" in ov:
            kwargs["snr_reference"] = str(ov["snr_reference"])
        if "noiseless" in ov:
            kwargs["noiseless"] = bool(ov["noiseless"])
        if "workers" in ov:
            kwargs["workers"] = int(ov["workers"])
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_run_config(path) -> RunConfig:
    p = Path(path)
    try:
        d = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read run config {p}: {e}") from e
    return run_config_from_dict(d, base_dir=p.parent)
