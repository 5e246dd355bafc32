"""Dual-path filter network: speaker-conditioned post-processing for speech separation."""

__version__ = "0.1.0"
