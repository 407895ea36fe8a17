import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; kernels fall back to numpy
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "biagree._ckernels",
                ["src/biagree/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                # BIAGREE_NATIVE=1 targets the build machine's SIMD (AVX2/FMA); not portable
                extra_compile_args=["-O3"] + (["-march=native"] if os.environ.get("BIAGREE_NATIVE") else []),
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
