"""Steganography toolkit for 3D Gaussian splatting assets.

Embeds a hidden scene's spherical-harmonic and opacity attributes inside a
public asset's vanilla attribute set, recovers them with a private key, and
quantifies robustness under structural attacks.
"""

from .gaussians import DualCloud, CloudGeometry, GaussianCloud, GaussianPrimitive
from .ply_io import load_ply, save_ply

__version__ = "0.1.0"

__all__ = [
    "DualCloud",
    "CloudGeometry",
    "GaussianCloud",
    "GaussianPrimitive",
    "load_ply",
    "save_ply",
    "__version__",
]
