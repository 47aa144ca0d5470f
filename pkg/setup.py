"""Build the optional Cython kernels.

The package works without them: ``advplan.kernels`` falls back to the
numpy implementation when the extension is missing.
"""
import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("ADVPLAN_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "advplan._kernels",
                    ["src/advplan/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )

setup(ext_modules=ext_modules)
