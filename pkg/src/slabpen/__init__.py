"""Multislab MRI slab-profile encoding with learned and handcrafted priors.

Simulates 3D multislab acquisitions with imperfect slab excitation profiles
and corrects them by regularised slab profile encoding, solved with
plug-and-play ADMM (no prior, total variation, or a multi-scale energy model
trained by denoising score matching).
"""

__version__ = "0.1.0"
