import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

npyrandom_dir = os.path.join(os.path.dirname(np.__file__), "random", "lib")

ext = Extension(
    "nested_impute._ckernels",
    ["src/nested_impute/_ckernels.pyx"],
    include_dirs=[np.get_include()],
    library_dirs=[npyrandom_dir],
    libraries=["npyrandom"],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    # The package falls back to the pure-python kernels if this fails to
    # build, so a missing compiler should not block installation.
    optional=True,
)

setup(ext_modules=cythonize([ext], compiler_directives={"language_level": "3"}))
