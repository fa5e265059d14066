"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (a pure-numpy fallback is selected at
import time), so a failed compile only degrades performance.
"""

from setuptools import Extension, setup


def extension_modules():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "gumbelcf._kernels_cy",
        sources=["src/gumbelcf/_kernels_cy.pyx"],
        include_dirs=[numpy.get_include()],
        # no -ffast-math: the posterior fix-up relies on IEEE comparisons
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    try:
        return cythonize([ext], language_level=3)
    except Exception:
        return []


setup(ext_modules=extension_modules())
