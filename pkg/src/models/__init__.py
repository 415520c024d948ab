"""Data models for Hebbian task-incremental learning."""

__version__ = "1.0.0"
