"""Build hook for the optional compiled selection kernel.

The package is fully functional without the extension: ``ctxforge.fusion``
falls back to the numpy kernel in ``ctxforge._greedy_py`` when
``ctxforge._greedy`` is absent or ``CTXFORGE_NO_EXT`` is set.
"""

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:  # source-only install; runtime falls back to numpy kernel
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "ctxforge._greedy",
                ["src/ctxforge/_greedy.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level="3",
    )

setup(ext_modules=ext_modules)
