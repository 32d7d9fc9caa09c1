"""Desk-scale simulator of an NPU + hybrid LPDDR5-PIM system running tree speculative decoding."""

__version__ = "0.1.0"
