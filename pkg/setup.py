"""Build script for the compiled conv kernels.

The extension is optional: if Cython or a C compiler is unavailable the
install still succeeds and the package falls back to the pure-numpy
kernels at import time.

Build in place with:  python setup.py build_ext --inplace
"""

from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "caproj.kernels._core",
                sources=["src/caproj/kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
