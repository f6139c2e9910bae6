"""Synthesis and blind identification of Ku-band LEO OFDM downlink signals."""

__version__ = "0.1.0"
