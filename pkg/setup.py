"""Build script. The Cython compositing kernel is optional: if it cannot be
built the package falls back to the pure-torch implementation at import time.

Set CTRL3D_NO_EXT=1 to skip the extension entirely.
"""

import os
import sys

from setuptools import setup

ext_modules = []
if not os.environ.get("CTRL3D_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "ctrl3d._compose_core",
                    ["src/ctrl3d/_compose_core.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except Exception as exc:  # pragma: no cover - build environment dependent
        print(f"ctrl3d: skipping Cython extension ({exc}); "
              "the pure-torch compositing path will be used", file=sys.stderr)

setup(ext_modules=ext_modules)
