"""Duration-based differentially private queries over camera event traces."""

__version__ = "0.1.0"
