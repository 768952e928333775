"""Neighbor-identifiability metrics and conv-agnostic graph neural networks.

Subpackages: ``graph`` (structure, bundles, generators), ``metrics``,
``autodiff`` (tape + Adam), ``models``, ``trainer``, ``cli``.
"""
from cagnn._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
