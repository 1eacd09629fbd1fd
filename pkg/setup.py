import os

from setuptools import setup

ext_modules = []
if not os.environ.get("NORTHCAPE_PURE_PYTHON"):
    try:
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [Extension("northcape._speedups", ["src/northcape/_speedups.pyx"])],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
