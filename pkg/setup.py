import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffast-math only at compile time: linking it would pull in crtfastmath and
# flip FTZ/DAZ for the whole interpreter. It must stay complete (no
# -fno-finite-math-only) or glibc stops offering the vector exp.
# Non-finite states are caught in Python after every growth step.
extensions = [
    Extension(
        "nicaimpute._kernels",
        ["src/nicaimpute/_kernels.pyx", "src/nicaimpute/_ext/cosattn.c", "src/nicaimpute/_ext/mlp.c"],
        include_dirs=[np.get_include(), "src/nicaimpute/_ext"],
        libraries=["m"],
        extra_compile_args=[
            "-O3",
            "-march=native",
            "-mprefer-vector-width=512",
            "-ffast-math",
            "-fopenmp-simd",
        ],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
