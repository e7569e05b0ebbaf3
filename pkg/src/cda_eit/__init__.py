"""Certified descent for inclusion identification in electrical impedance tomography."""

__version__ = "0.1.0"
