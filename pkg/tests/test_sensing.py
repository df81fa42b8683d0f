import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamslam.beam import PathEstimate, PathEstimateSet
from beamslam.geometry import Anchor, Vec2, Wall, bearing, mirror_anchor, path_angles
from beamslam.sensing import (
    AnchorTrack,
    ImuReading,
    ParticleCloud,
    RadioMap,
    SlamConfig,
    imu_sample,
    map_estimate,
    predict_ue,
    slam_step,
    systematic_resample,
)

CFG = SlamConfig()


def delta_cloud(p: Vec2, n=1000):
    return ParticleCloud.uniform(np.tile([p.x, p.y], (n, 1)))


def los_estimate(ue, pa, gain=0.8):
    th = bearing(ue, pa)
    return PathEstimate(th, th, gain)


class TestImuSample:
    def test_zero_sigma_exact(self):
        rng = np.random.default_rng(0)
        r = imu_sample(Vec2(1.5, -0.3), 0.0, rng)
        assert r.accel == Vec2(1.5, -0.3)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            imu_sample(Vec2(0, 0), -0.1, np.random.default_rng(0))

    def test_sample_std_and_mean(self):
        rng = np.random.default_rng(1)
        sigma = 0.02
        n = 100_000
        xs = np.array([imu_sample(Vec2(1.0, 2.0), sigma, rng).accel.as_tuple() for _ in range(n)])
        assert np.std(xs[:, 0]) == pytest.approx(sigma, rel=0.03)
        assert np.std(xs[:, 1]) == pytest.approx(sigma, rel=0.03)
        bound = 4 * sigma / math.sqrt(n)
        assert abs(np.mean(xs[:, 0]) - 1.0) < bound
        assert abs(np.mean(xs[:, 1]) - 2.0) < bound


class TestPredictUe:
    def test_cold_start(self):
        x, v = predict_ue(Vec2(3, 4), None, None, None, dt=1.0)
        assert x == Vec2(3, 4)
        assert v == Vec2(0, 0)

    def test_constant_velocity_exact(self):
        a0 = ImuReading(Vec2(0, 0))
        x, v = predict_ue(Vec2(2, 1), Vec2(1, 1), a0, a0, dt=1.0)
        assert x.x == pytest.approx(3.0) and x.y == pytest.approx(1.0)
        assert v.x == pytest.approx(1.0) and v.y == pytest.approx(0.0)

    def test_constant_acceleration_closed_form(self):
        # from rest at origin with accel (1, 0): x(t) = t^2/2
        a = ImuReading(Vec2(1, 0))
        for t in range(2, 7):
            x_prev = Vec2((t - 1) ** 2 / 2, 0.0)
            x_prev2 = Vec2((t - 2) ** 2 / 2, 0.0)
            x, v = predict_ue(x_prev, x_prev2, a, a, dt=1.0)
            assert x.x == pytest.approx(t**2 / 2, abs=1e-12)
            assert v.x == pytest.approx(float(t), abs=1e-12)

    @given(
        x0=st.floats(-10, 10), v0=st.floats(-10, 10), acc=st.floats(-5, 5),
        dt=st.floats(0.01, 5.0), t=st.floats(0.0, 50.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_quadratic_trajectory_identity(self, x0, v0, acc, dt, t):
        pos = lambda s: x0 + v0 * s + 0.5 * acc * s * s
        a = ImuReading(Vec2(acc, 0))
        x, v = predict_ue(Vec2(pos(t), 0), Vec2(pos(t - dt), 0), a, a, dt=dt)
        assert x.x == pytest.approx(pos(t + dt), rel=1e-6, abs=1e-6)
        assert v.x == pytest.approx(v0 + acc * (t + dt), rel=1e-6, abs=1e-6)

    def test_bad_dt(self):
        with pytest.raises(ValueError):
            predict_ue(Vec2(0, 0), None, None, None, dt=0.0)


class TestParticleCloud:
    def test_uniform_mean(self):
        c = ParticleCloud.uniform(np.array([[0.0, 0.0], [2.0, 0.0]]))
        assert c.mean() == Vec2(1.0, 0.0)

    def test_weighted_mean(self):
        c = ParticleCloud(np.array([[0.0, 0.0], [4.0, 0.0]]), np.array([0.75, 0.25]))
        assert c.mean() == Vec2(1.0, 0.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            ParticleCloud(np.zeros((1, 2)), np.ones(1))  # P < 2
        with pytest.raises(ValueError):
            ParticleCloud(np.zeros((2, 2)), np.array([0.7, 0.7]))  # sum != 1
        with pytest.raises(ValueError):
            ParticleCloud(np.zeros((2, 2)), np.array([1.5, -0.5]))  # negative

    def test_sigma_r_of_gaussian_cloud(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(0.0, 1.0, size=(200_000, 2))
        c = ParticleCloud.uniform(pts)
        # radial distances of a unit isotropic Gaussian are Rayleigh(1)
        assert c.sigma_r() == pytest.approx(math.sqrt((4 - math.pi) / 2), rel=0.02)


class TestSystematicResample:
    def test_multiplicities_bracket_expected_counts(self):
        rng = np.random.default_rng(5)
        w = rng.random(50)
        w /= w.sum()
        idx = systematic_resample(w, rng)
        counts = np.bincount(idx, minlength=50)
        assert np.all(counts >= np.floor(50 * w))
        assert np.all(counts <= np.ceil(50 * w))

    def test_mean_preserved_in_expectation(self):
        rng = np.random.default_rng(6)
        pts = rng.normal(size=(40, 2))
        w = rng.random(40)
        w /= w.sum()
        target = w @ pts
        reps = 10_000
        means = np.empty((reps, 2))
        for r in range(reps):
            means[r] = pts[systematic_resample(w, rng)].mean(axis=0)
        se = means.std(axis=0) / math.sqrt(reps)
        assert np.all(np.abs(means.mean(axis=0) - target) < 3 * se)


def wall_geometry():
    """PA, one wall, its mirror anchor, and exact angles for a given UE."""
    pa = Vec2(0.0, 10.0)
    wall = Wall(Vec2(-20.0, 14.0), Vec2(20.0, 14.0))
    va = mirror_anchor(pa, wall)
    return pa, wall, va


def exact_estimates(ue, pa, wall, va):
    los = path_angles(Anchor("PA", pa), pa, ue, [wall])
    nlos = path_angles(Anchor("VA", va, wall_index=0), pa, ue, [wall])
    return PathEstimateSet((
        PathEstimate(los.aoa, los.aod, 0.8),
        PathEstimate(nlos.aoa, nlos.aod, 0.4),
    ))


class TestSlamStep:
    def test_fixed_point_truth_concentrated(self):
        pa, wall, va = wall_geometry()
        ue = Vec2(3.0, 0.0)
        rng = np.random.default_rng(7)
        m = RadioMap(
            ue=delta_cloud(ue, n=4000),  # mean of the 0.01 m process jitter ~ 2e-4
            anchors=(
                AnchorTrack(delta_cloud(pa), "PA", last_seen=0, confirmed=True, hits=5, localized=True),
                AnchorTrack(delta_cloud(va), "VA", last_seen=0, confirmed=True, hits=5, localized=True),
            ),
            ue_prev=ue, ue_velocity=Vec2(0, 0), step=0, rng=rng,
        )
        m2 = slam_step(m, ue, Vec2(0, 0), exact_estimates(ue, pa, wall, va), CFG)
        assert m2.ue_estimate.dist(ue) < 1e-3
        assert m2.anchors[0].mean.dist(pa) < 1e-3
        assert m2.anchors[1].mean.dist(va) < 1e-3

    def test_triangulation_from_moving_baseline(self):
        anchor = Vec2(0.3, 10.0)
        rng = np.random.default_rng(0)
        m = RadioMap.create(CFG, rng, Vec2(-5.0, 0.0), ue_spread=1e-6)
        for k in range(10):
            ue = Vec2(-5.0 + k, 0.0)
            th = bearing(ue, anchor)
            est = PathEstimateSet((PathEstimate(th, th, 0.8),))
            m = slam_step(m, ue, Vec2(1.0, 0.0), est, CFG)
        assert len(m.anchors) == 1  # every step associated to the same track
        assert m.anchors[0].confirmed
        assert m.anchors[0].mean.dist(anchor) < 0.2

    def test_birth_and_confirmation_timing(self):
        pa, wall, va = wall_geometry()
        ue = Vec2(3.0, 0.0)
        rng = np.random.default_rng(8)
        m = RadioMap.create(CFG, rng, ue, ue_spread=1e-6, known_bs=pa)
        los = PathEstimateSet((los_estimate(ue, pa),))
        m = slam_step(m, ue, Vec2(0, 0), los, CFG)
        assert len(m.anchors) == 1
        # new path appears: candidate exists immediately, confirmed two hits later
        both = exact_estimates(ue, pa, wall, va)
        m = slam_step(m, ue, Vec2(0, 0), both, CFG)  # step 2: birth
        assert len(m.anchors) == 2
        assert not m.anchors[1].confirmed
        m = slam_step(m, ue, Vec2(0, 0), both, CFG)  # step 3: first hit
        assert not m.anchors[1].confirmed
        m = slam_step(m, ue, Vec2(0, 0), both, CFG)  # step 4 = 2 + confirm_hits
        assert m.anchors[1].confirmed
        assert len(m.anchors) == 2  # no duplicate births along the way

    def test_interrupted_hits_restart(self):
        pa, wall, va = wall_geometry()
        ue = Vec2(3.0, 0.0)
        rng = np.random.default_rng(9)
        m = RadioMap.create(CFG, rng, ue, ue_spread=1e-6, known_bs=pa)
        los = PathEstimateSet((los_estimate(ue, pa),))
        both = exact_estimates(ue, pa, wall, va)
        m = slam_step(m, ue, Vec2(0, 0), both, CFG)  # birth
        m = slam_step(m, ue, Vec2(0, 0), both, CFG)  # hit 1
        m = slam_step(m, ue, Vec2(0, 0), los, CFG)  # miss: consecutive count resets
        assert m.anchors[1].hits == 0
        m = slam_step(m, ue, Vec2(0, 0), both, CFG)
        assert not m.anchors[1].confirmed
        m = slam_step(m, ue, Vec2(0, 0), both, CFG)
        assert m.anchors[1].confirmed

    def test_retirement_and_rebirth(self):
        pa, wall, va = wall_geometry()
        ue = Vec2(3.0, 0.0)
        rng = np.random.default_rng(10)
        m = RadioMap.create(CFG, rng, ue, ue_spread=1e-6, known_bs=pa)
        los = PathEstimateSet((los_estimate(ue, pa),))
        both = exact_estimates(ue, pa, wall, va)
        m = slam_step(m, ue, Vec2(0, 0), both, CFG)  # birth at step 1
        for _ in range(CFG.retire_misses):
            m = slam_step(m, ue, Vec2(0, 0), los, CFG)
        assert not m.anchors[1].retired  # misses == 3 only at the NEXT step's start
        m = slam_step(m, ue, Vec2(0, 0), both, CFG)
        assert m.anchors[1].retired  # kept in the map, out of association
        assert len(m.anchors) == 3  # the reappeared path started a fresh track
        # the pinned PA never retires
        assert not m.anchors[0].retired

    def test_weight_invariants_after_steps(self):
        pa, wall, va = wall_geometry()
        rng = np.random.default_rng(11)
        m = RadioMap.create(CFG, rng, Vec2(3.0, 0.0), ue_spread=0.5, known_bs=pa)
        for k in range(6):
            ue = Vec2(3.0 + 0.5 * k, 0.0)
            m = slam_step(m, ue, Vec2(0.5, 0), exact_estimates(ue, pa, wall, va), CFG)
        for cloud in [m.ue] + [t.cloud for t in m.anchors]:
            assert abs(cloud.weights.sum() - 1.0) <= 1e-9
            assert not np.any(np.isnan(cloud.weights))
        assert m.weight_resets == 0

    def test_zero_likelihood_triggers_uniform_reset(self):
        cfg = SlamConfig(gate=1.0, clutter=0.0)
        anchor = Vec2(0.0, 10.0)
        ue = Vec2(0.5, 0.0)
        rng = np.random.default_rng(12)
        m = RadioMap(
            ue=delta_cloud(ue),
            anchors=(AnchorTrack(delta_cloud(anchor), "PA", last_seen=0,
                                 confirmed=True, hits=5, localized=True),),
            ue_prev=ue, ue_velocity=Vec2(0, 0), step=0, rng=rng,
        )
        th = bearing(ue, anchor) + 0.5  # inside the gate, hopeless for the Gaussian
        est = PathEstimateSet((PathEstimate(th, th, 0.8),))
        m2 = slam_step(m, ue, Vec2(0, 0), est, cfg)
        assert m2.weight_resets >= 1
        assert abs(m2.anchors[0].cloud.weights.sum() - 1.0) <= 1e-9
        assert np.allclose(m2.anchors[0].cloud.weights, 1.0 / m2.anchors[0].cloud.n)

    def test_known_bs_stays_pinned(self):
        pa, wall, va = wall_geometry()
        rng = np.random.default_rng(13)
        m = RadioMap.create(CFG, rng, Vec2(3.0, 0.0), ue_spread=0.1, known_bs=pa)
        for k in range(4):
            ue = Vec2(3.0 + k, 0.0)
            m = slam_step(m, ue, Vec2(1, 0), exact_estimates(ue, pa, wall, va), CFG)
        assert m.pa.mean.dist(pa) < 1e-9
        assert m.pa.cloud.sigma_r() < 1e-12
        assert m.pa.pinned

    def test_strongest_unmatched_claims_missing_pa(self):
        pa, wall, va = wall_geometry()
        ue = Vec2(3.0, 0.0)
        rng = np.random.default_rng(14)
        m = RadioMap.create(CFG, rng, ue, ue_spread=1e-6)  # no known BS
        m = slam_step(m, ue, Vec2(0, 0), exact_estimates(ue, pa, wall, va), CFG)
        kinds = [t.kind for t in m.anchors]
        assert kinds.count("PA") == 1
        assert m.anchors[0].kind == "PA"  # the 0.8-gain path claimed it
        assert m.anchors[0].last_gain == pytest.approx(0.8)
        assert m.anchors[1].kind == "VA"

    def test_anchor_spread_shrinks_with_information(self):
        anchor = Vec2(0.3, 10.0)
        sig = []
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            m = RadioMap.create(CFG, rng, Vec2(-5.0, 0.0), ue_spread=1e-6)
            per_step = []
            for k in range(8):
                ue = Vec2(-5.0 + k, 0.0)
                th = bearing(ue, anchor)
                m = slam_step(m, ue, Vec2(1, 0), PathEstimateSet((PathEstimate(th, th, 0.8),)), CFG)
                per_step.append(m.anchors[0].cloud.sigma_r())
            sig.append(per_step)
        med = np.median(np.array(sig), axis=0)
        assert med[-1] < med[0]
        assert np.all(np.diff(med) < 0.05)  # non-increasing up to resampling noise


class TestMapOutputs:
    def test_map_estimate_reports_confirmed_only(self):
        ue = Vec2(0.0, 0.0)
        rng = np.random.default_rng(15)
        m = RadioMap(
            ue=delta_cloud(ue),
            anchors=(
                AnchorTrack(delta_cloud(Vec2(0, 10)), "PA", 0, confirmed=True, hits=5, localized=True),
                AnchorTrack(delta_cloud(Vec2(5, 5)), "VA", 0, confirmed=False),
            ),
            ue_prev=ue, ue_velocity=Vec2(0, 0), step=0, rng=rng,
        )
        got_ue, got_anchors = map_estimate(m)
        assert got_ue.dist(ue) < 1e-9
        assert len(got_anchors) == 1
        assert got_anchors[0].dist(Vec2(0, 10)) < 1e-9

    def test_snapshot_orders_by_gain_and_skips_retired(self):
        ue = Vec2(0.0, 0.0)
        rng = np.random.default_rng(16)
        m = RadioMap(
            ue=delta_cloud(ue),
            anchors=(
                AnchorTrack(delta_cloud(Vec2(0, 10)), "PA", 0, confirmed=True,
                            hits=5, last_gain=0.8, localized=True),
                AnchorTrack(delta_cloud(Vec2(5, 5)), "VA", 0, confirmed=True,
                            hits=5, last_gain=0.3, localized=True),
                AnchorTrack(delta_cloud(Vec2(-5, 5)), "VA", 0, confirmed=True,
                            hits=5, last_gain=0.9, retired=True, localized=True),
                AnchorTrack(delta_cloud(Vec2(1, 7)), "VA", 0, confirmed=False,
                            last_gain=0.5),
            ),
            ue_prev=ue, ue_velocity=Vec2(0, 0), step=0, rng=rng,
        )
        snap = m.snapshot()
        assert [t.kind for t in snap.tracked] == ["PA", "VA"]
        assert [t.last_gain for t in snap.tracked] == [0.8, 0.3]
        assert snap.pa_mean.dist(Vec2(0, 10)) < 1e-9
        assert snap.ue_sigma == 0.0

    def test_at_most_one_pa_enforced(self):
        ue = Vec2(0.0, 0.0)
        with pytest.raises(ValueError):
            RadioMap(
                ue=delta_cloud(ue),
                anchors=(
                    AnchorTrack(delta_cloud(Vec2(0, 10)), "PA", 0),
                    AnchorTrack(delta_cloud(Vec2(1, 10)), "PA", 0),
                ),
                ue_prev=ue, ue_velocity=Vec2(0, 0), step=0,
                rng=np.random.default_rng(0),
            )


class TestSlamConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SlamConfig(sigma_angle=0.0)
        with pytest.raises(ValueError):
            SlamConfig(birth_range=(5.0, 1.0))
        with pytest.raises(ValueError):
            SlamConfig(resample_threshold=0.0)
        with pytest.raises(ValueError):
            SlamConfig(n_particles=1)
        with pytest.raises(ValueError):
            SlamConfig(gate=-1.0)

    def test_default_gate_tracks_sigma(self):
        assert SlamConfig(sigma_angle=0.01).base_gate == pytest.approx(0.03)
        assert SlamConfig(sigma_angle=0.01, gate=0.2).base_gate == 0.2
