"""Discrete-latent-code generative modeling on 2D grid mixtures.

Submodules: ``nn`` (numerics), ``toydata``, ``diffusion`` (continuous DDPM),
``codec`` (SEM encoder and codes), ``discrete`` (absorbing diffusion prior),
``gmm``, ``metrics``, ``checkpoint``, ``config``, ``experiments``, ``cli``.
"""

__version__ = "0.1.0"
