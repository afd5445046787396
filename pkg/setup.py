"""Builds the optional compiled kernel extension.

The package works without it (pure numpy fallback); the extension is marked
optional so a failed compile degrades to the pure lane instead of breaking
the install.
"""

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

ext = Extension(
    "bonenet._core",
    sources=["src/bonenet/_core.pyx"],
    include_dirs=[np.get_include(), "src/bonenet"],
    # -funsafe-math-optimizations lets gcc vectorize the fixed-order reductions;
    # results stay bitwise deterministic per build. NaN/Inf semantics are kept
    # (no -ffinite-math-only) and no fast-math object is linked.
    extra_compile_args=[
        "-O3",
        "-march=native",
        "-std=c99",
        "-fopenmp",
        "-funsafe-math-optimizations",
        "-fno-math-errno",
    ],
    extra_link_args=["-fopenmp"],
    optional=True,
)

setup(ext_modules=cythonize([ext], language_level=3))
