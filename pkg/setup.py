"""Build script for the optional compiled convolution kernels.

The package works without the extension (a pure-numpy fallback is selected
at import time), so the build degrades gracefully when Cython or a C
compiler is unavailable.
"""

import os

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("DRANET_SKIP_EXTENSION"):
    ext_modules = cythonize(
        [
            Extension(
                "dranet._convkernels",
                ["src/dranet/_convkernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
