"""Build script: compiles the optional row-kernel extension.

The package works without the extension (pure-Python path is selected at
import time), so a failed compile downgrades to a warning instead of
aborting the install.
"""

import sys

from setuptools import setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/covidmx/_rowkernel.pyx"],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    print(f"covidmx: skipping compiled row kernel ({exc})", file=sys.stderr)
    ext_modules = []

setup(ext_modules=ext_modules)
