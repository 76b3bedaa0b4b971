"""Build script: compiles the native kernel extension when Cython is available.

The package is fully functional without the extension (a pure-numpy fallback is
selected at import time), so any build failure here degrades to a source-only
install rather than aborting.
"""
from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "cslam._kernels._native",
                ["src/cslam/_kernels/_native.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    print(f"cslam: native kernels not built ({exc}); using pure-python fallback")

setup(ext_modules=ext_modules)
