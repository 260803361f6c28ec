"""Build script: compiles the optional correlation extension.

The package works without the extension (a numpy fallback is selected at
import time), so the extension is marked optional and build failures only
produce a warning.
"""

from setuptools import setup, Extension

try:
    import numpy as np
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "patchgp._accel._corr",
                ["src/patchgp/_accel/_corr.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
