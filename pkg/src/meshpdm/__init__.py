"""Correspondence-based statistical shape models learned directly from
populations of surface meshes: permutation-invariant mesh encoding, template
deformation, an order-preserving shape VAE with template feedback, and the
standard shape-statistics evaluation suite.
"""

__version__ = "0.1.0"

from .errors import CheckpointError, NumericError, ValidationError  # noqa: F401
