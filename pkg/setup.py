"""Build script for the optional compiled cutting-model core.

The package is fully functional without the extension (a vectorized numpy
fallback is selected at import time); the extension just makes the hot
geometry kernels a lot faster.
"""
import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext = Extension(
    "grindplan._core",
    sources=["src/grindplan/_core.pyx"],
    include_dirs=[numpy.get_include()],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    extra_compile_args=["-O3"],
    optional=True,  # build failure degrades to the pure-python backend
)

setup(ext_modules=cythonize([ext], language_level="3") if cythonize else [])
