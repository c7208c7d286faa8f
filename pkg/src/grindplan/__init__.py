"""grindplan: simulation and planning toolkit for robotic shaping by belt grinding.

The package simulates material removal as geometric splitting of a
heightfield by a cutting plane, collects small-removal-volume episode data,
trains a variational shape codec and a trajectory diffusion model on it, and
plans closed-loop cutting sequences under guide costs, with random-shooting
and conditional-autoencoder baselines for comparison.
"""
from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
