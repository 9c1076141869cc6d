"""Task-oriented semantic communication with a mixture-of-experts transformer."""

__version__ = "0.1.0"
