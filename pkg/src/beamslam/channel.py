"""ULA responses, geometric channel synthesis, path gains, noisy measurements.

The channel is narrowband rank-L: H = sum_l g_l a_UE(theta_l) a_BS(phi_l)^H
with half-wavelength ULAs on both sides and angles in (0, pi).
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .geometry import PathGeometry

__all__ = [
    "ArrayConfig",
    "PathParams",
    "NoiseModel",
    "array_response",
    "steering_matrix",
    "assemble_channel",
    "path_gain",
    "measure_beam_pair",
]


@dataclass(frozen=True)
class ArrayConfig:
    n_elements: int
    side: str = "BS"

    def __post_init__(self):
        n = self.n_elements
        if n < 2 or (n & (n - 1)) != 0:
            raise ValueError("n_elements must be a power of two >= 2")
        if self.side not in ("BS", "UE"):
            raise ValueError("side must be BS or UE")


@dataclass(frozen=True)
class PathParams:
    aoa: float
    aod: float
    gain: complex

    def __post_init__(self):
        if not (0.0 < self.aoa < math.pi and 0.0 < self.aod < math.pi):
            raise ValueError("path angles must lie in (0, pi)")
        if not math.isfinite(abs(self.gain)):
            raise ValueError("path gain must be finite")


@dataclass
class NoiseModel:
    """Complex Gaussian measurement noise, total variance sigma^2.

    Carries its own RNG stream; one NoiseModel per simulation run (or
    per sub-stream) keeps draws reproducible and isolated.
    """

    sigma: float
    seed: object = None
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        self._rng = np.random.default_rng(self.seed)

    def draw(self) -> complex:
        if self.sigma == 0.0:
            return 0.0 + 0.0j
        re, im = self._rng.standard_normal(2)
        return (self.sigma / math.sqrt(2.0)) * complex(re, im)


def array_response(cfg: ArrayConfig, angle: float) -> np.ndarray:
    """Unit-norm ULA response (1/sqrt(n)) exp(-j pi i cos(angle)), i = 0..n-1."""
    if not (0.0 < angle < math.pi):
        raise ValueError(f"angle {angle} outside (0, pi)")
    n = cfg.n_elements
    idx = np.arange(n)
    return np.exp(-1j * math.pi * math.cos(angle) * idx) / math.sqrt(n)


def steering_matrix(cfg: ArrayConfig, angles: np.ndarray) -> np.ndarray:
    """Column-stacked array responses, shape (n_elements, len(angles))."""
    angles = np.asarray(angles, dtype=float)
    idx = np.arange(cfg.n_elements)[:, None]
    return np.exp(-1j * math.pi * np.cos(angles)[None, :] * idx) / math.sqrt(cfg.n_elements)


def assemble_channel(paths: Sequence[PathParams], bs: ArrayConfig,
                     ue: ArrayConfig) -> np.ndarray:
    """H = sum_l g_l a_UE(aoa_l) a_BS(aod_l)^H; empty path list -> zeros."""
    h = np.zeros((ue.n_elements, bs.n_elements), dtype=complex)
    if not paths:
        return h
    a_ue = steering_matrix(ue, [p.aoa for p in paths])
    a_bs = steering_matrix(bs, [p.aod for p in paths])
    gains = np.array([p.gain for p in paths], dtype=complex)
    return (a_ue * gains[None, :]) @ a_bs.conj().T


def path_gain(geom: PathGeometry, model: str = "table", *,
              rng: Optional[np.random.Generator] = None,
              wavelength: float = 0.0107,
              reflection_loss: float = 0.6) -> complex:
    """Complex gain for one path.

    `table`: |g| ~ U(0.7, 0.9) LoS / U(0.3, 0.5) NLoS, uniform phase.
    `freespace`: |g| = wavelength/(4 pi length) times the reflection loss
    for bounced paths, phase -2 pi length / wavelength.
    """
    if geom.length <= 0:
        raise ValueError("path length must be positive")
    reflected = geom.reflection_point is not None
    if model == "table":
        if rng is None:
            rng = np.random.default_rng()
        lo, hi = (0.3, 0.5) if reflected else (0.7, 0.9)
        mag = rng.uniform(lo, hi)
        phase = rng.uniform(0.0, 2.0 * math.pi)
    elif model == "freespace":
        mag = wavelength / (4.0 * math.pi * geom.length)
        if reflected:
            mag *= reflection_loss
        phase = -2.0 * math.pi * geom.length / wavelength
    else:
        raise ValueError(f"unknown gain model {model!r}")
    return mag * complex(math.cos(phase), math.sin(phase))


def measure_beam_pair(h: np.ndarray, w: np.ndarray, f: np.ndarray,
                      noise: NoiseModel) -> complex:
    """One noisy beam-pair measurement r = w^H H f + w^H n (pilot s = 1).

    Both beams must be unit norm (1e-6 tolerance): with ||w|| = 1 the
    projected noise w^H n is complex Gaussian with variance sigma^2, so it
    is drawn directly as a scalar.
    """
    nu, nb = h.shape
    if w.shape != (nu,) or f.shape != (nb,):
        raise ValueError("beam dimensions do not match channel")
    if abs(np.linalg.norm(w) - 1.0) > 1e-6 or abs(np.linalg.norm(f) - 1.0) > 1e-6:
        raise ValueError("beams must be unit norm")
    w = np.ascontiguousarray(w, dtype=complex)
    f = np.ascontiguousarray(f, dtype=complex)
    h = np.ascontiguousarray(h, dtype=complex)
    return _kernels.pair_response(w, h, f) + noise.draw()
