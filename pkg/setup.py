"""Build script for the optional compiled kernel core.

The package is fully functional without the extension (a NumPy fallback is
selected at import time); the extension is what makes multi-worker runs
scale, so we try hard to build it but never fail the install over it.
"""

import os

import numpy
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Build the Cython core if possible, otherwise warn and continue."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        print(f"WARNING: compiled kernels not built ({exc}); "
              "sphax will use the pure-NumPy fallback.")


def extensions():
    from Cython.Build import cythonize

    ext = Extension(
        "sphax._kernels_cy",
        sources=["src/sphax/_kernels_cy.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], language_level=3)


if os.environ.get("SPHAX_NO_EXT"):
    setup()
else:
    setup(ext_modules=extensions(), cmdclass={"build_ext": optional_build_ext})
