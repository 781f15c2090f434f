import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

# The compiled kernels are an optional speedup: the package falls back to the
# numpy reference kernels when the extension is missing, so a failed build
# must not block installation.
ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "fabricseg.kernels._fast",
                sources=["src/fabricseg/kernels/_fast.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3", "-ffast-math", "-march=native", "-funroll-loops"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
