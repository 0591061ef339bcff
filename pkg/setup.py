from setuptools import setup, Extension
from Cython.Build import cythonize
import numpy as np

extensions = [
    Extension(
        "alignlab._fastcore",
        ["src/alignlab/_fastcore.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3", "-funroll-loops"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives=dict(
            language_level="3",
            boundscheck=False,
            wraparound=False,
            cdivision=True,
        ),
    ),
)
