"""Build script for the optional compiled projection kernels.

The package works without a compiler: if Cython or a C toolchain is
missing the extension is skipped and ``reifenberg._backend`` falls back to
the vectorised numpy implementation at import time.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("REIFENBERG_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "reifenberg._kernels",
                    ["src/reifenberg/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except Exception as exc:  # pragma: no cover - build environment dependent
        print(f"reifenberg: compiled kernels disabled ({exc})")
        ext_modules = []

setup(ext_modules=ext_modules)
