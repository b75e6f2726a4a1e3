import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "pdelearn._convcore",
        ["src/pdelearn/_convcore.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=[
            "-O3",
            "-march=native",
            "-funroll-loops",
            "-fno-math-errno",
            "-fno-trapping-math",
            "-fno-signed-zeros",
            "-fassociative-math",
            "-fopenmp",
        ],
        extra_link_args=["-fopenmp"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
)
