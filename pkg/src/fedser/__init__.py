"""Semi-supervised federated speech emotion recognition simulator."""

__version__ = "0.1.0"
