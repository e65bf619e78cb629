"""Federated graph learning with secret message passing over coded shares."""

__version__ = "0.1.0"
