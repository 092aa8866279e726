import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "carmreg._kernels",
        ["src/carmreg/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O2", "-fopenmp"],
        extra_link_args=["-fopenmp"],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
