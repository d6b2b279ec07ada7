import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# The event loop spends its time in tight per-arrival loops; the compiled core
# is optional and the package falls back to the pure-Python kernel if the
# extension is missing (see safelb/_kernel.py).
extensions = [
    Extension(
        "safelb._core",
        ["src/safelb/_core.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
