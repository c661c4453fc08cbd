"""Inverse design of transverse-mode beamsplitters and two-photon interference analysis."""

__version__ = "0.1.0"
