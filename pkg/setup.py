# Builds the optional compiled kernel core.
# In-place build for development:  python setup.py build_ext --inplace
import os

import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext as _build_ext

BASE_ARGS = ["-O3"]
FAST_ARGS = ["-O3", "-march=native"]


class build_ext(_build_ext):
    """Try -march=native first; retry portable flags if the compiler balks."""

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception:
            if ext.extra_compile_args == FAST_ARGS:
                ext.extra_compile_args = BASE_ARGS
                super().build_extension(ext)
            else:
                raise


try:
    from Cython.Build import cythonize

    args = BASE_ARGS if os.environ.get("LIDARMOS_PORTABLE") else FAST_ARGS
    ext_modules = cythonize(
        [
            Extension(
                "lidarmos._native",
                sources=["src/lidarmos/_native.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=args,
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError:
    # No Cython: the package still works on the pure-python kernel backend.
    ext_modules = []

setup(ext_modules=ext_modules, cmdclass={"build_ext": build_ext})
