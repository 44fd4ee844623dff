"""DoubleEcho: copresence verification from room impulse responses."""

__version__ = "0.1.0"
