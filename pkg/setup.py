import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "lingflow.retrieval._maxsim",
        ["src/lingflow/retrieval/_maxsim.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        optional=os.environ.get("LINGFLOW_REQUIRE_EXT") != "1",
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
