import os
import platform

from setuptools import setup


def _compile_args():
    args = ["-O3"]
    # tuned for the building machine unless a portable build is requested
    if os.environ.get("BCMB_PORTABLE") != "1" and platform.machine() in ("x86_64", "AMD64"):
        args.append("-march=native")
    return args


ext_modules = []
if os.environ.get("BCMB_NO_EXT") != "1":
    try:
        import numpy as np
        import scipy.linalg.cython_blas  # noqa: F401  (sgemm for the kernel)
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "bcmb.kernels._attention_ext",
                    ["src/bcmb/kernels/_attention_ext.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=_compile_args(),
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
