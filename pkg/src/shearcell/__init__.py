"""Doubly-periodic suspensions of rigid particles in 2D shearing Stokes
flow, solved by a periodized second-kind boundary integral equation."""

__version__ = "0.1.0"
