"""Certified inner approximations of the power a distribution network can exchange with the grid."""

__version__ = "0.1.0"
