"""Numpy reference implementations of the hot kernels."""

import numpy as np


def pair_response(w, h, f):
    """Combined beam-pair response w^H H f (no noise)."""
    return complex(np.vdot(w, h @ f))


def wrapped_angle_diff(a, b):
    """Distance between angles on the folded half circle, in [0, pi/2]."""
    d = np.abs(np.asarray(a) - np.asarray(b)) % np.pi
    return np.minimum(d, np.pi - d)


def bearing_loglik(src_x, src_y, dst_x, dst_y, theta, sigma):
    """Gaussian log-likelihood of a folded bearing measurement.

    Bearings run src->dst, measured from the negative y axis and folded
    into [0, pi). All four coordinate arrays must have equal length.
    """
    b = (np.arctan2(dst_y - src_y, dst_x - src_x) + 0.5 * np.pi) % np.pi
    d = wrapped_angle_diff(b, theta)
    return -(d * d) / (2.0 * sigma * sigma)


def systematic_resample(weights, u0):
    """Systematic resampling: indices drawn at positions (u0 + k)/n."""
    n = len(weights)
    positions = (u0 + np.arange(n)) / n
    cumsum = np.cumsum(weights)
    cumsum[-1] = 1.0  # guard against round-off
    return np.searchsorted(cumsum, positions, side="right").astype(np.int64)
