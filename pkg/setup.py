"""Build script: compiles the optional BM25 scoring kernel.

The package is pure Python; the Cython extension only accelerates the
hot scoring loop. If Cython or a C compiler is unavailable the build
proceeds without it and perjar falls back to the Python kernel at import.
"""

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """build_ext that downgrades compiler failures to a warning."""

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
        print(f"WARNING: native BM25 kernel not built ({exc}); "
              "using the pure-Python fallback.")


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        print("WARNING: Cython not available; skipping native BM25 kernel.")
        return []
    return cythonize(
        [
            Extension(
                "perjar.retrieval._bm25_native",
                ["src/perjar/retrieval/_bm25_native.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )


setup(ext_modules=extensions(), cmdclass={"build_ext": optional_build_ext})
