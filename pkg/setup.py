import os

import numpy as np
from setuptools import Extension, setup

# The compiled kernels are optional: the package falls back to numpy when
# Cython (or a compiler) is unavailable at build time.
ext_modules = []
if os.environ.get("STPREDICT_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "stpredict.autodiff._ckernels",
                    ["src/stpredict/autodiff/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": 3},
        )

setup(ext_modules=ext_modules)
