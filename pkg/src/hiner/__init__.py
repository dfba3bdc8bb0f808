"""Wavelength-conditioned neural codec for hyperspectral images."""

from . import bitstream, cli, codec_core, downstream, errors, hsi_io, training

__all__ = [
    "bitstream",
    "cli",
    "codec_core",
    "downstream",
    "errors",
    "hsi_io",
    "training",
]

__version__ = "0.1.0"
