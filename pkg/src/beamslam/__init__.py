"""beamslam: mmWave beam management + bearing-only SLAM simulation library."""

__version__ = "0.1.0"

from ._kernels import COMPILED as KERNELS_COMPILED  # noqa: F401
