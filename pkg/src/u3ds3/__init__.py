"""Unsupervised 3D semantic segmentation with superpoints and two-pathway clustering.

Importing the package is cheap; submodules are loaded on use so that the
command line can cap BLAS threads before numpy starts.
"""

__version__ = "0.1.0"
