"""Multi-task respiratory sound classification with hard and soft parameter sharing."""

__version__ = "0.1.0"
