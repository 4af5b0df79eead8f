"""Build script for the optional compiled simulation kernel.

The package is pure Python except for unravelopt._kernel, a Cython
extension holding the per-trajectory integration loops.  If the
extension cannot be built (no compiler, no Cython) the install still
succeeds and the package falls back to the numpy implementation in
unravelopt._kernel_py at import time.
"""

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Allow the build to proceed without the compiled kernel."""

    def run(self):
        try:
            build_ext.run(self)
        except Exception as exc:  # compiler missing entirely
            self._warn(exc)

    def build_extension(self, ext):
        try:
            build_ext.build_extension(self, ext)
        except Exception as exc:
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        import warnings

        warnings.warn(
            "could not build the compiled kernel (%s); "
            "the pure-Python fallback will be used" % (exc,)
        )


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "unravelopt._kernel",
        ["src/unravelopt/_kernel.pyx"],
    )
    try:
        return cythonize([ext], language_level=3)
    except Exception as exc:  # translation failure must not block the install
        optional_build_ext._warn(exc)
        return []


setup(
    ext_modules=extensions(),
    cmdclass={"build_ext": optional_build_ext},
)
