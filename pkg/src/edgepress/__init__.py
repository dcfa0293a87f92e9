"""Hardware-aware compression toolkit for small CNN compute graphs."""

__version__ = "0.1.0"
