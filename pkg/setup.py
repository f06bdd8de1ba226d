import numpy as np
from setuptools import Extension, setup

# The compiled propagation kernel is optional: without Cython (or a C
# compiler) the package falls back to the pure-numpy implementation at
# import time, see stochlm/kernels.py.
try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is not None:
    extensions = cythonize(
        [
            Extension(
                "stochlm._lorenz_cy",
                ["src/stochlm/_lorenz_cy.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
else:
    extensions = []

setup(ext_modules=extensions)
