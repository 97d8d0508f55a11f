"""fogml: communication-efficient fog ML simulator."""

__version__ = "0.1.0"
