import math
import warnings

import numpy as np
import pytest

from beamslam.channel import ArrayConfig, array_response
from beamslam.codebook import (
    AngularGrid,
    bisect_toward,
    build_hierarchical,
    build_tracking,
    beam_pattern,
    get_factory,
    synthesize_beam,
    tracking_start_layer,
)

# Expected pattern margins below were frozen from an independent SVD
# least-squares oracle (numpy.linalg.lstsq on the grid equations, gains
# evaluated with explicit per-bin inner products).

UE = lambda n: ArrayConfig(n, "UE")


def mean_power_db(amps, bins):
    return 10 * math.log10(np.mean(amps[[b - 1 for b in bins]] ** 2))


class TestGrid:
    def test_centers(self):
        g = AngularGrid(4)
        np.testing.assert_allclose(g.centers(), [math.pi / 8, 3 * math.pi / 8,
                                                 5 * math.pi / 8, 7 * math.pi / 8])

    def test_bin_roundtrip(self):
        g = AngularGrid(512)
        for k in (1, 2, 255, 256, 511, 512):
            assert g.bin_of(g.center_of(k)) == k

    def test_bin_clamps(self):
        g = AngularGrid(16)
        assert g.bin_of(-0.5) == 1
        assert g.bin_of(math.pi + 0.5) == 16

    def test_validation(self):
        for bad in (2, 3, 6, 12):
            with pytest.raises(ValueError):
                AngularGrid(bad)


class TestSynthesis:
    def test_halfband_margin(self):
        # frozen oracle: 5.2222 dB in/out power-mean contrast
        grid = AngularGrid(16)
        b1, _ = synthesize_beam(UE(8), grid, range(1, 9), range(9, 17))
        amps = beam_pattern(UE(8), grid, b1)
        margin = mean_power_db(amps, range(1, 9)) - mean_power_db(amps, range(9, 17))
        assert margin == pytest.approx(5.2222, abs=0.01)

    def test_matches_svd_solution(self):
        grid = AngularGrid(32)
        cfg = UE(8)
        b1, b2 = synthesize_beam(cfg, grid, range(5, 9), range(9, 13))
        a_h = np.stack([array_response(cfg, th).conj() for th in grid.centers()])
        g = np.zeros((32, 2))
        g[4:8, 0] = 1.0
        g[8:12, 1] = 1.0
        f, *_ = np.linalg.lstsq(a_h, g, rcond=None)
        f = f / np.linalg.norm(f)
        np.testing.assert_allclose(b1.coefficients, f[:, 0], atol=1e-9)
        np.testing.assert_allclose(b2.coefficients, f[:, 1], atol=1e-9)

    def test_joint_frobenius_norm(self):
        grid = AngularGrid(64)
        b1, b2 = synthesize_beam(UE(8), grid, range(1, 17), range(17, 33))
        joint = np.linalg.norm(b1.coefficients) ** 2 + np.linalg.norm(b2.coefficients) ** 2
        assert joint == pytest.approx(1.0, abs=1e-9)

    def test_degenerate_all_ones_is_flat(self):
        grid = AngularGrid(16)
        full = range(1, 17)
        b1, b2 = synthesize_beam(UE(8), grid, full, full)
        amps = beam_pattern(UE(8), grid, b1)
        assert amps.max() - amps.min() < 1e-6
        np.testing.assert_allclose(b1.coefficients, b2.coefficients)

    def test_finest_beam_argmax(self):
        # exact self-peak when bins are no finer than the array resolution
        grid = AngularGrid(16)
        cfg = UE(16)
        for k in range(1, 17):
            comp = k + 1 if k < 16 else k - 1
            beam, _ = synthesize_beam(cfg, grid, [k], [comp])
            amps = beam_pattern(cfg, grid, beam)
            assert int(np.argmax(amps)) + 1 == k

    def test_finest_beam_offset_bounded(self):
        # oracle: off-grid-resolution fits peak within 2 bins for N=64, n=8
        grid = AngularGrid(64)
        cfg = UE(8)
        worst = 0
        for k in range(1, 65):
            comp = k + 1 if k < 64 else k - 1
            beam, _ = synthesize_beam(cfg, grid, [k], [comp])
            amps = beam_pattern(cfg, grid, beam)
            worst = max(worst, abs(int(np.argmax(amps)) + 1 - k))
        assert worst <= 2

    def test_validation_errors(self):
        grid = AngularGrid(16)
        with pytest.raises(ValueError):
            synthesize_beam(UE(8), grid, [1, 2], [2, 3])  # overlap
        with pytest.raises(ValueError):
            synthesize_beam(UE(8), grid, [1, 2], [3, 4, 5])  # size mismatch
        with pytest.raises(ValueError):
            synthesize_beam(UE(8), grid, [1, 3], [5, 7])  # non-contiguous
        with pytest.raises(ValueError):
            synthesize_beam(UE(8), grid, [15, 16], [17, 18])  # outside grid

    def test_ridge_flag(self):
        assert synthesize_beam(UE(8), AngularGrid(4), [1, 2], [3, 4])[0].ridged
        assert not synthesize_beam(UE(8), AngularGrid(16), range(1, 9), range(9, 17))[0].ridged


class TestHierarchical:
    def test_layer_counts(self):
        cb = build_hierarchical(UE(16), AngularGrid(512))
        assert cb.n_layers == 9
        assert len(cb.layers[8]) == 256
        assert sum(2 * len(layer) for layer in cb.layers) == 2 * (2**9) - 2

    def test_smallest(self):
        with pytest.warns(RuntimeWarning):
            cb = build_hierarchical(UE(8), AngularGrid(4))
        assert cb.n_layers == 2
        assert len(cb.layers[0]) == 1 and len(cb.layers[1]) == 2

    def test_finest_coverage(self):
        cb = build_hierarchical(UE(8), AngularGrid(64))
        for k in range(1, 33):
            for m in (1, 2):
                assert cb.subset(6, k)[m - 1].coverage == frozenset({2 * (k - 1) + m})

    def test_partition_per_layer(self):
        cb = build_hierarchical(UE(8), AngularGrid(64))
        for layer in cb.layers:
            seen = []
            for subset in layer:
                for beam in subset:
                    seen.extend(beam.coverage)
            assert sorted(seen) == list(range(1, 65))

    def test_subset_norms(self):
        cb = build_hierarchical(UE(16), AngularGrid(128))
        for layer in cb.layers:
            for b1, b2 in layer:
                joint = np.linalg.norm(b1.coefficients) ** 2 + np.linalg.norm(b2.coefficients) ** 2
                assert joint == pytest.approx(1.0, abs=1e-6)

    def test_pattern_fidelity(self):
        # frozen oracle margins (in/out mean-power contrast, dB) at N=64, n=8:
        # layer 1 worst 4.867, layer 2 worst 7.217, layer 3 worst 6.918
        cfg = UE(8)
        grid = AngularGrid(64)
        cb = build_hierarchical(cfg, grid)
        floors = {1: 4.8, 2: 7.0, 3: 6.7}
        for j, floor in floors.items():
            for subset in cb.layers[j - 1]:
                for beam in subset:
                    amps = beam_pattern(cfg, grid, beam)
                    inside = sorted(beam.coverage)
                    outside = [b for b in range(1, 65) if b not in beam.coverage]
                    margin = mean_power_db(amps, inside) - mean_power_db(amps, outside)
                    assert margin >= floor

    def test_coarse_grid_warns(self):
        with pytest.warns(RuntimeWarning):
            build_hierarchical(UE(16), AngularGrid(8))

    def test_deterministic(self):
        a = build_hierarchical(UE(8), AngularGrid(32))
        b = build_hierarchical(UE(8), AngularGrid(32))
        for la, lb in zip(a.layers, b.layers):
            for (a1, a2), (b1, b2) in zip(la, lb):
                np.testing.assert_array_equal(a1.coefficients, b1.coefficients)
                np.testing.assert_array_equal(a2.coefficients, b2.coefficients)


class TestTracking:
    def test_start_layer_table(self):
        grid = AngularGrid(512)
        assert tracking_start_layer(grid, 0.1 * math.pi) == 4
        assert tracking_start_layer(grid, math.pi) == 1
        assert tracking_start_layer(grid, math.pi / 512) == 9

    def test_layer_count_for_tenth_pi(self):
        tc = build_tracking(UE(16), AngularGrid(512), 0.4 * math.pi, 0.1 * math.pi)
        assert tc.start_layer == 4
        assert len(tc.layers) == 6

    def test_window_covers_scale(self):
        grid = AngularGrid(512)
        tc = build_tracking(UE(16), grid, 0.4 * math.pi, 0.1 * math.pi)
        lo, hi = tc.window
        assert (hi - lo + 1) * grid.resolution >= 0.1 * math.pi
        assert lo <= tc.center_bin <= hi

    def test_full_scale_matches_hierarchical_descent(self):
        cfg = UE(8)
        grid = AngularGrid(64)
        hier = build_hierarchical(cfg, grid)
        for center in (math.pi / 2, 0.3 * math.pi, 0.9 * math.pi):
            tc = build_tracking(cfg, grid, center, math.pi)
            assert tc.start_layer == 1
            c = tc.center_bin
            lo, hi = 1, 64
            for j, subset in enumerate(tc.layers, start=1):
                width = (hi - lo + 1)
                k = (lo - 1) // width + 1
                ref = hier.subset(j, k)
                for beam, ref_beam in zip(subset, ref):
                    np.testing.assert_allclose(
                        beam.coefficients, ref_beam.coefficients, atol=1e-9
                    )
                    assert beam.coverage == ref_beam.coverage
                lo, hi = bisect_toward(lo, hi, c)

    def test_edge_windows_shift_not_shrink(self):
        grid = AngularGrid(512)
        near_zero = build_tracking(UE(16), grid, grid.center_of(2), 0.1 * math.pi)
        assert near_zero.window == (1, 64)
        near_pi = build_tracking(UE(16), grid, grid.center_of(511), 0.1 * math.pi)
        assert near_pi.window == (449, 512)

    def test_minimal_scale_single_layer(self):
        grid = AngularGrid(512)
        tc = build_tracking(UE(16), grid, math.pi / 2, grid.resolution)
        assert tc.start_layer == 9
        assert len(tc.layers) == 1
        b1, b2 = tc.layers[0]
        assert len(b1.coverage) == 1 and len(b2.coverage) == 1

    def test_domain_validation(self):
        grid = AngularGrid(16)
        with pytest.raises(ValueError):
            build_tracking(UE(8), grid, 0.0, 0.1)
        with pytest.raises(ValueError):
            build_tracking(UE(8), grid, 1.0, 0.0)
        with pytest.raises(ValueError):
            build_tracking(UE(8), grid, 1.0, 4.0)


class TestFactoryCache:
    def test_pair_cached_identity(self):
        factory = get_factory(UE(8), AngularGrid(64))
        assert factory.pair(1, 32) is factory.pair(1, 32)

    def test_factory_shared(self):
        assert get_factory(UE(8), AngularGrid(64)) is get_factory(UE(8), AngularGrid(64))
