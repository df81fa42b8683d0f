import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamslam.channel import (
    ArrayConfig,
    NoiseModel,
    PathParams,
    array_response,
    assemble_channel,
    measure_beam_pair,
    path_gain,
    steering_matrix,
)
from beamslam.geometry import Anchor, PathGeometry, Vec2


def resp(n, theta, side="UE"):
    return array_response(ArrayConfig(n, side), theta)


class TestArrayResponse:
    def test_broadside_two_elements(self):
        a = resp(2, math.pi / 2)
        np.testing.assert_allclose(a, np.array([1, 1]) / math.sqrt(2), atol=1e-12)

    def test_hand_value_pi_over_three(self):
        # cos(pi/3) = 1/2 -> phases [0, -pi/2]
        a = resp(2, math.pi / 3)
        expected = np.array([1.0, np.exp(-1j * math.pi / 2)]) / math.sqrt(2)
        np.testing.assert_allclose(a, expected, atol=1e-12)

    def test_four_elements_explicit(self):
        theta = 1.0
        a = resp(4, theta)
        expected = np.exp(-1j * math.pi * np.arange(4) * math.cos(theta)) / 2.0
        np.testing.assert_allclose(a, expected, atol=1e-12)

    def test_domain_errors(self):
        for bad in (0.0, math.pi, -0.1, math.pi + 0.1):
            with pytest.raises(ValueError):
                resp(4, bad)

    @given(
        st.sampled_from([2, 4, 8, 16, 64]),
        st.floats(min_value=1e-6, max_value=math.pi - 1e-6),
    )
    @settings(max_examples=60, deadline=None)
    def test_unit_norm(self, n, theta):
        assert np.linalg.norm(resp(n, theta)) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_when_cos_differs_by_two_over_n(self):
        # pi*i*(cos a - cos b) spans multiples of 2*pi/n -> geometric sum is 0
        n = 8
        ca = 0.25
        a = resp(n, math.acos(ca))
        b = resp(n, math.acos(ca - 2.0 / n))
        assert abs(np.vdot(a, b)) < 1e-12

    def test_steering_matrix_columns(self):
        cfg = ArrayConfig(8, "UE")
        angles = np.array([0.3, 1.1, 2.0])
        m = steering_matrix(cfg, angles)
        assert m.shape == (8, 3)
        for k, th in enumerate(angles):
            np.testing.assert_allclose(m[:, k], resp(8, th), atol=1e-12)


class TestAssemble:
    def test_single_path_broadside(self):
        cfg_ue = ArrayConfig(2, "UE")
        cfg_bs = ArrayConfig(2, "BS")
        paths = [PathParams(aoa=math.pi / 2, aod=math.pi / 2, gain=1.0 + 0j)]
        h = assemble_channel(paths, cfg_bs, cfg_ue)
        np.testing.assert_allclose(h, np.full((2, 2), 0.5), atol=1e-12)

    def test_empty_is_zero(self):
        h = assemble_channel([], ArrayConfig(8, "BS"), ArrayConfig(4, "UE"))
        assert h.shape == (4, 8)
        assert np.all(h == 0)

    def test_linearity_in_paths(self):
        cfg_ue = ArrayConfig(8, "UE")
        cfg_bs = ArrayConfig(16, "BS")
        p1 = PathParams(aoa=0.7, aod=1.9, gain=0.5 - 0.2j)
        p2 = PathParams(aoa=2.2, aod=0.4, gain=-0.1 + 0.8j)
        h12 = assemble_channel([p1, p2], cfg_bs, cfg_ue)
        h1 = assemble_channel([p1], cfg_bs, cfg_ue)
        h2 = assemble_channel([p2], cfg_bs, cfg_ue)
        np.testing.assert_allclose(h12, h1 + h2, atol=1e-12)

    def test_rank_one_outer_product(self):
        cfg_ue = ArrayConfig(4, "UE")
        cfg_bs = ArrayConfig(4, "BS")
        p = PathParams(aoa=1.2, aod=2.5, gain=0.3 + 0.1j)
        h = assemble_channel([p], cfg_bs, cfg_ue)
        expected = p.gain * np.outer(
            resp(4, p.aoa), resp(4, p.aod).conj()
        )
        np.testing.assert_allclose(h, expected, atol=1e-12)
        assert np.linalg.matrix_rank(h) == 1

    def test_frobenius_norm_single_path(self):
        # unit-norm steering vectors -> ||H||_F = |g|
        h = assemble_channel(
            [PathParams(aoa=0.9, aod=1.4, gain=0.37 * np.exp(1j * 0.2))],
            ArrayConfig(32, "BS"),
            ArrayConfig(16, "UE"),
        )
        assert np.linalg.norm(h) == pytest.approx(0.37, abs=1e-12)


def los_geometry(length=10.0):
    return PathGeometry(anchor_index=0, aoa=1.0, aod=1.0, length=length, reflection_point=None)


def nlos_geometry(length=10.0):
    return PathGeometry(
        anchor_index=1, aoa=1.0, aod=2.0, length=length, reflection_point=Vec2(1.0, 0.0)
    )


class TestPathGain:
    def test_table_ranges(self):
        rng = np.random.default_rng(0)
        los = np.array([abs(path_gain(los_geometry(), "table", rng=rng)) for _ in range(500)])
        nlos = np.array([abs(path_gain(nlos_geometry(), "table", rng=rng)) for _ in range(500)])
        assert los.min() >= 0.7 and los.max() <= 0.9
        assert nlos.min() >= 0.3 and nlos.max() <= 0.5

    def test_table_phase_uniform(self):
        rng = np.random.default_rng(1)
        ph = np.array([np.angle(path_gain(los_geometry(), "table", rng=rng)) for _ in range(4000)])
        # circular mean of a uniform phase is near zero
        assert abs(np.mean(np.exp(1j * ph))) < 0.05

    def test_freespace_magnitude_and_phase(self):
        lam = 0.0107
        d = 4.0
        g_los = path_gain(los_geometry(d), "freespace", rng=np.random.default_rng(0), wavelength=lam)
        assert abs(g_los) == pytest.approx(lam / (4 * math.pi * d), rel=1e-12)
        assert np.angle(g_los) == pytest.approx(
            math.remainder(-2 * math.pi * d / lam, 2 * math.pi), abs=1e-9
        )
        g_nlos = path_gain(
            nlos_geometry(d), "freespace", rng=np.random.default_rng(0), wavelength=lam
        )
        assert abs(g_nlos) == pytest.approx(0.6 * lam / (4 * math.pi * d), rel=1e-12)

    def test_unknown_model(self):
        with pytest.raises(ValueError):
            path_gain(los_geometry(), "bogus", rng=np.random.default_rng(0))


class TestMeasure:
    def test_matched_beams_noiseless(self):
        cfg_ue = ArrayConfig(8, "UE")
        cfg_bs = ArrayConfig(8, "BS")
        p = PathParams(aoa=1.3, aod=0.8, gain=0.8 + 0j)
        h = assemble_channel([p], cfg_bs, cfg_ue)
        w = resp(8, p.aoa)
        f = resp(8, p.aod)
        r = measure_beam_pair(h, w, f, NoiseModel(sigma=0.0))
        assert r == pytest.approx(0.8 + 0j, abs=1e-12)

    def test_orthogonal_beams_measure_zero(self):
        n = 8
        p = PathParams(aoa=math.acos(0.25), aod=math.pi / 2, gain=1.0 + 0j)
        h = assemble_channel([p], ArrayConfig(n, "BS"), ArrayConfig(n, "UE"))
        w = resp(n, math.acos(0.25 - 2.0 / n))
        f = resp(n, p.aod)
        r = measure_beam_pair(h, w, f, NoiseModel(sigma=0.0))
        assert abs(r) < 1e-12

    def test_noise_power_matches_sigma(self):
        sigma = 0.3
        noise = NoiseModel(sigma=sigma, seed=42)
        h = np.zeros((4, 4), dtype=complex)
        w = resp(4, 1.0)
        f = resp(4, 2.0)
        draws = np.array([measure_beam_pair(h, w, f, noise) for _ in range(100_000)])
        assert np.mean(np.abs(draws) ** 2) == pytest.approx(sigma**2, rel=0.03)
        # circularity: real/imag parts each sigma^2/2
        assert np.var(draws.real) == pytest.approx(sigma**2 / 2, rel=0.05)
        assert np.var(draws.imag) == pytest.approx(sigma**2 / 2, rel=0.05)

    def test_seed_reproducible(self):
        h = np.ones((2, 2), dtype=complex) * 0.1
        w = resp(2, 1.0)
        f = resp(2, 1.5)
        a = [measure_beam_pair(h, w, f, NoiseModel(0.2, seed=9)) for _ in range(5)]
        b = [measure_beam_pair(h, w, f, NoiseModel(0.2, seed=9)) for _ in range(5)]
        assert a == b

    def test_non_unit_beam_rejected(self):
        h = np.zeros((4, 4), dtype=complex)
        good = resp(4, 1.0)
        with pytest.raises(ValueError):
            measure_beam_pair(h, 2.0 * good, good, NoiseModel(0.0))
        with pytest.raises(ValueError):
            measure_beam_pair(h, good, np.zeros(4, dtype=complex), NoiseModel(0.0))

    def test_shape_mismatch_rejected(self):
        h = np.zeros((4, 8), dtype=complex)
        with pytest.raises(ValueError):
            measure_beam_pair(h, resp(8, 1.0), resp(8, 1.0), NoiseModel(0.0))


class TestConfigValidation:
    def test_power_of_two_required(self):
        with pytest.raises(ValueError):
            ArrayConfig(6, "UE")
        with pytest.raises(ValueError):
            ArrayConfig(1, "BS")

    def test_side_checked(self):
        with pytest.raises(ValueError):
            ArrayConfig(8, "AP")

    def test_path_params_domain(self):
        with pytest.raises(ValueError):
            PathParams(aoa=0.0, aod=1.0, gain=1.0)
        with pytest.raises(ValueError):
            PathParams(aoa=1.0, aod=math.pi, gain=1.0)

    def test_anchor_wall_index_rules(self):
        with pytest.raises(ValueError):
            Anchor("VA", Vec2(0, 0))  # VA requires wall_index
        with pytest.raises(ValueError):
            Anchor("PA", Vec2(0, 0), wall_index=0)
