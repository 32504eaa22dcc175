"""Build script for the optional Cython kernel extension.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so a failed extension build is demoted to a
warning rather than an install failure.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "chunklab.kernels._cykernels",
                ["src/chunklab/kernels/_cykernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build-env dependent
    print(f"warning: skipping Cython kernel build ({exc}); "
          "the numpy fallback will be used", file=sys.stderr)

setup(ext_modules=ext_modules)
