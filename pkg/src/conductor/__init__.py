"""Neuron conductance on a from-scratch toy cross-encoder.

Modules: ``tape`` (reverse-mode autodiff), ``model`` (the cross-encoder),
``baseline``, ``conductance``, ``schemes`` and ``expr`` (neuron-set algebra),
``ablation`` (pruning + nDCG), ``workbench``/``cli`` (orchestration).
"""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
