"""Build script: compiles the Cython kernel extension when possible.

The package works without the extension (a NumPy fallback is selected at
import time), so any failure here degrades to a pure-Python install rather
than aborting. Set EDGESHIELD_NO_EXT=1 to skip the extension build entirely.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("EDGESHIELD_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "edgeshield._kernels",
                    sources=["src/edgeshield/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    # -fassociative-math (plus its prerequisites) lets the
                    # compiler vectorize the reduction loops; NaN/Inf
                    # propagation is preserved, unlike full -ffast-math.
                    extra_compile_args=[
                        "-O3",
                        "-fassociative-math",
                        "-fno-signed-zeros",
                        "-fno-trapping-math",
                        "-fno-math-errno",
                    ],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
