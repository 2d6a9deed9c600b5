from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
    import scipy  # noqa: F401  (the kernel cimports its BLAS bindings)
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("sstune._fused", ["src/sstune/_fused.pyx"], extra_compile_args=["-O3"], optional=True)],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
