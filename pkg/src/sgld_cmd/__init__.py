"""SGLD simulation library and moderate-deviation experiment harness."""

__version__ = "0.1.0"
