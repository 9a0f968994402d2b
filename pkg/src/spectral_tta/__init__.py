"""Test-time adaptation of a small vision transformer through its singular values."""

__version__ = "0.1.0"
