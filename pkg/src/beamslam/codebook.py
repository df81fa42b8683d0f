"""Hierarchical and prior-centered beam codebooks via least-squares pattern fits.

Beams are synthesized by fitting the array response to a 0/1 indicator over a
uniform angular grid; a codebook layer halves beam width relative to the layer
above it, supporting bisection descent.  Tracking codebooks start at the layer
whose beam width first covers a given angular scale and narrow from there
around a center angle.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Optional, Tuple

import numpy as np

from .channel import ArrayConfig, steering_matrix

_RIDGE = 1e-9
_COND_LIMIT = 1e12


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class AngularGrid:
    """Uniform grid over (0, pi): bin k (1-based) centered at pi*(k-0.5)/N."""

    n_bins: int

    def __post_init__(self):
        if self.n_bins < 4 or not _is_pow2(self.n_bins):
            raise ValueError(f"n_bins must be a power of two >= 4, got {self.n_bins}")

    @property
    def resolution(self) -> float:
        return math.pi / self.n_bins

    def centers(self) -> np.ndarray:
        return (np.arange(1, self.n_bins + 1) - 0.5) * self.resolution

    def center_of(self, k: int) -> float:
        if not 1 <= k <= self.n_bins:
            raise ValueError(f"bin {k} outside 1..{self.n_bins}")
        return (k - 0.5) * self.resolution

    def bin_of(self, angle: float) -> int:
        """Right-closed bins: angle in ((k-1)*res, k*res] -> k, clamped to 1..N."""
        k = math.ceil(angle / self.resolution)
        return min(max(k, 1), self.n_bins)


@dataclass(frozen=True, eq=False)
class BeamVector:
    coefficients: np.ndarray
    coverage: frozenset
    ridged: bool = False

    def __post_init__(self):
        if np.linalg.norm(self.coefficients) > 1.0 + 1e-9:
            raise ValueError("beam coefficients exceed unit norm")


Subset = Tuple[BeamVector, BeamVector]


class BeamFactory:
    """Least-squares beam synthesis on a fixed (array, grid), with caching.

    Solves min_F ||A^H F - G|| over the full grid via the normal equations;
    a near-singular Gram matrix (grid coarser than the array) falls back to a
    ridge-regularized solve and the produced beams carry ridged=True.
    """

    def __init__(self, cfg: ArrayConfig, grid: AngularGrid):
        self.cfg = cfg
        self.grid = grid
        a = steering_matrix(cfg, grid.centers())  # (n, N)
        gram = a @ a.conj().T
        self.ridged = bool(np.linalg.cond(gram) > _COND_LIMIT)
        if self.ridged:
            gram = gram + _RIDGE * np.eye(cfg.n_elements)
        self._m = np.linalg.solve(gram, a)  # (n, N)
        self._prefix = np.concatenate(
            [np.zeros((cfg.n_elements, 1), complex), np.cumsum(self._m, axis=1)], axis=1
        )
        self._a = a
        self._pair_cache: Dict[Tuple[int, int], Subset] = {}

    def _window_fit(self, lo: int, hi: int) -> np.ndarray:
        """Unnormalized LS fit targeting contiguous bins lo..hi (1-based)."""
        return self._prefix[:, hi] - self._prefix[:, lo - 1]

    def fit_bins(self, bins) -> np.ndarray:
        idx = np.asarray(sorted(bins), dtype=int) - 1
        return self._m[:, idx].sum(axis=1)

    def pair(self, lo: int, hi: int) -> Subset:
        """Normalized two-beam subset splitting window lo..hi into halves."""
        key = (lo, hi)
        cached = self._pair_cache.get(key)
        if cached is not None:
            return cached
        width = hi - lo + 1
        if width < 2 or width % 2:
            raise ValueError(f"window {lo}..{hi} must have even width >= 2")
        if lo < 1 or hi > self.grid.n_bins:
            raise ValueError(f"window {lo}..{hi} outside grid 1..{self.grid.n_bins}")
        half = width // 2
        u1 = self._window_fit(lo, lo + half - 1)
        u2 = self._window_fit(lo + half, hi)
        c = 1.0 / math.sqrt(np.linalg.norm(u1) ** 2 + np.linalg.norm(u2) ** 2)
        subset = (
            BeamVector(c * u1, frozenset(range(lo, lo + half)), self.ridged),
            BeamVector(c * u2, frozenset(range(lo + half, hi + 1)), self.ridged),
        )
        self._pair_cache[key] = subset
        return subset

    def gains(self, coefficients: np.ndarray) -> np.ndarray:
        """|a(center_u)^H f| over all grid bins."""
        return np.abs(self._a.conj().T @ coefficients)


@lru_cache(maxsize=64)
def get_factory(cfg: ArrayConfig, grid: AngularGrid) -> BeamFactory:
    return BeamFactory(cfg, grid)


@lru_cache(maxsize=32)
def reliable_bins(cfg: ArrayConfig, grid: AngularGrid, margin: float = 0.0,
                  scale: Optional[float] = None) -> Tuple[int, ...]:
    """Bins a lone on-center path is pinned to exactly, by descent and by scan.

    Once bisection windows shrink below the array's resolvable width, the LS
    fit returns nearly identical sibling beams whose ripple can peak a bin or
    two off-window (worst near the grid edges, where the angle grid oversamples
    cos space).  A bin is *reliable* when (a) noiseless bisection, always
    keeping the stronger of the two half-window beams, terminates at that bin
    with the winner ahead by the relative `margin` at every layer, and (b) the
    exhaustive finest-beam scan peaks there, ahead of the runner-up by the same
    margin.  With `scale` set, bisection starts from the prior-sized window
    centered on the bin (the beam-tracking entry point) instead of the full
    grid.
    """
    factory = get_factory(cfg, grid)
    n = grid.n_bins
    a_cols = factory._a  # responses at all bin centers, one column per bin
    finest = np.column_stack(
        [factory.fit_bins(frozenset([k])) for k in range(1, n + 1)]
    )
    finest /= np.linalg.norm(finest, axis=0, keepdims=True)
    scan = np.abs(finest.conj().T @ a_cols)
    top2 = np.sort(scan, axis=0)[-2:, :]
    scan_ok = ((np.argmax(scan, axis=0) + 1) == np.arange(1, n + 1)) & (
        top2[1] > (1.0 + margin) * top2[0]
    )
    out = []
    for b in range(1, n + 1):
        if not scan_ok[b - 1]:
            continue
        a = a_cols[:, b - 1]
        if scale is None:
            lo, hi = 1, n
        else:
            lo, hi = start_window(grid, b, tracking_start_layer(grid, scale))
        good = True
        while hi > lo:
            beam_lo, beam_hi = factory.pair(lo, hi)
            c_lo, c_hi = beam_lo.coefficients, beam_hi.coefficients
            # measurements go out through unit-norm beams, so compare that way
            r_lo = abs(np.vdot(c_lo, a)) / np.linalg.norm(c_lo)
            r_hi = abs(np.vdot(c_hi, a)) / np.linalg.norm(c_hi)
            if max(r_lo, r_hi) <= (1.0 + margin) * min(r_lo, r_hi):
                good = False
                break
            mid = (lo + hi) // 2
            if r_hi > r_lo:
                lo = mid + 1
            else:
                hi = mid
        if good and lo == b:
            out.append(b)
    return tuple(out)


def _check_contiguous(bins) -> Tuple[int, ...]:
    b = tuple(sorted(bins))
    if not b:
        raise ValueError("empty bin set")
    if b[-1] - b[0] + 1 != len(b) or len(set(b)) != len(b):
        raise ValueError(f"bins {b} not contiguous")
    return b


def synthesize_beam(side_cfg: ArrayConfig, grid: AngularGrid, target_bins,
                    companion_bins) -> Subset:
    """Fit a beam pair to 0/1 indicators over the grid, jointly normalized.

    target and companion must be contiguous, equal-size, and disjoint;
    identical sets are allowed as a degenerate case (returns twin beams).
    """
    t = _check_contiguous(target_bins)
    c = _check_contiguous(companion_bins)
    if len(t) != len(c):
        raise ValueError("target and companion sizes differ")
    if t != c and set(t) & set(c):
        raise ValueError("target and companion overlap")
    if min(t + c) < 1 or max(t + c) > grid.n_bins:
        raise ValueError("bins outside grid")
    factory = get_factory(side_cfg, grid)
    u1 = factory.fit_bins(t)
    u2 = factory.fit_bins(c)
    norm = math.sqrt(np.linalg.norm(u1) ** 2 + np.linalg.norm(u2) ** 2)
    return (
        BeamVector(u1 / norm, frozenset(t), factory.ridged),
        BeamVector(u2 / norm, frozenset(c), factory.ridged),
    )


@dataclass(frozen=True, eq=False)
class HierarchicalCodebook:
    side: str
    n_layers: int
    layers: tuple  # layers[j-1] = tuple of 2^(j-1) subsets

    def subset(self, j: int, k: int) -> Subset:
        return self.layers[j - 1][k - 1]


@dataclass(frozen=True, eq=False)
class TrackingCodebook:
    center_angle: float
    scale: float
    start_layer: int
    center_bin: int
    window: Tuple[int, int]  # start-layer combined window, width 2*N/2^start
    layers: tuple  # one subset per layer, start_layer..J, narrowing on center


def build_hierarchical(cfg: ArrayConfig, grid: AngularGrid) -> HierarchicalCodebook:
    """All log2(N) layers; layer j holds 2^(j-1) subsets of two beams each."""
    n_bins = grid.n_bins
    if cfg.n_elements > n_bins:
        warnings.warn(
            f"grid ({n_bins} bins) coarser than array ({cfg.n_elements} elements); "
            "pattern fits are ridge-regularized",
            RuntimeWarning,
            stacklevel=2,
        )
    factory = get_factory(cfg, grid)
    j_total = n_bins.bit_length() - 1
    layers = []
    for j in range(1, j_total + 1):
        width = n_bins >> (j - 1)  # 2W: the subset window
        layers.append(
            tuple(factory.pair(k * width + 1, (k + 1) * width) for k in range(2 ** (j - 1)))
        )
    return HierarchicalCodebook(cfg.side, j_total, tuple(layers))


def tracking_start_layer(grid: AngularGrid, scale: float) -> int:
    """Layer whose two-beam window first covers `scale` radians."""
    j_total = grid.n_bins.bit_length() - 1
    needed = math.ceil(math.log2(scale / grid.resolution) - 1e-12)
    needed = min(max(needed, 1), j_total)
    return j_total - needed + 1


def bisect_toward(lo: int, hi: int, target_bin: int) -> Tuple[int, int]:
    """Halve window lo..hi keeping the side that contains target_bin."""
    half = (hi - lo + 1) // 2
    if target_bin <= lo + half - 1:
        return lo, lo + half - 1
    return lo + half, hi


def start_window(grid: AngularGrid, center_bin: int, layer: int) -> Tuple[int, int]:
    """Layer-`layer` two-beam window around center_bin, shifted to fit the grid."""
    n_bins = grid.n_bins
    w = n_bins >> layer
    lo, hi = center_bin - w + 1, center_bin + w
    if lo < 1:
        lo, hi = 1, 2 * w
    elif hi > n_bins:
        lo, hi = n_bins - 2 * w + 1, n_bins
    return lo, hi


def build_tracking(cfg: ArrayConfig, grid: AngularGrid, center: float,
                   scale: float) -> TrackingCodebook:
    """Beam subsets narrowing around `center`, starting wide enough for `scale`.

    The start-layer window is centered on the center bin and shifted (width
    preserving) to stay inside the grid; deeper layers bisect toward the
    center bin, so a scale of pi reproduces the hierarchical descent path.
    """
    if not 0.0 < center < math.pi:
        raise ValueError(f"center {center} outside (0, pi)")
    if not 0.0 < scale <= math.pi + 1e-12:
        raise ValueError(f"scale {scale} outside (0, pi]")
    n_bins = grid.n_bins
    j_total = n_bins.bit_length() - 1
    j_start = tracking_start_layer(grid, scale)
    c = grid.bin_of(center)
    lo, hi = start_window(grid, c, j_start)
    factory = get_factory(cfg, grid)
    layers = []
    cur_lo, cur_hi = lo, hi
    for _ in range(j_start, j_total + 1):
        layers.append(factory.pair(cur_lo, cur_hi))
        cur_lo, cur_hi = bisect_toward(cur_lo, cur_hi, c)
    return TrackingCodebook(center, scale, j_start, c, (lo, hi), tuple(layers))


def beam_pattern(cfg: ArrayConfig, grid: AngularGrid, beam: BeamVector) -> np.ndarray:
    """Amplitude |a(center_u)^H f| per grid bin, for export and inspection."""
    return get_factory(cfg, grid).gains(beam.coefficients)


def pattern_rows(cfg: ArrayConfig, grid: AngularGrid, codebook: HierarchicalCodebook):
    """Yield (layer, subset, beam, bin_index, gain_db) rows over the grid."""
    for j in range(1, codebook.n_layers + 1):
        for k in range(1, 2 ** (j - 1) + 1):
            for m, beam in enumerate(codebook.subset(j, k), start=1):
                amps = beam_pattern(cfg, grid, beam)
                for u, amp in enumerate(amps, start=1):
                    yield j, k, m, u, 20.0 * math.log10(max(amp, 1e-15))
