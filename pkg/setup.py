"""Build script: compiles the optional fast kernels extension.

The package works without the extension (a numpy fallback is selected at
import time), so extension build failures are downgraded to a warning.
"""

import warnings

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "beamslam._kernels._core",
                ["src/beamslam/_kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build environment dependent
    warnings.warn(f"fast kernels will not be compiled: {exc}")


class _OptionalBuildExt:
    pass


def _build(**kwargs):
    setup(ext_modules=ext_modules, **kwargs)


if __name__ == "__main__":
    try:
        _build()
    except SystemExit:
        if not ext_modules:
            raise
        # retry as pure python if the compiler is unusable
        warnings.warn("extension build failed; installing pure-python package")
        setup(ext_modules=[])
