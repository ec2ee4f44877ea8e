"""Hot numeric kernels, each with a numba and a vectorised-numpy backend."""
