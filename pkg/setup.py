"""Builds the optional compiled kernel extension.

The package is fully functional without it (a numpy fallback is selected at
import time); set MEMSSL_SKIP_EXT=1 to install pure-Python only.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("MEMSSL_SKIP_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "memssl.backend._ckernels",
                    ["src/memssl/backend/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
