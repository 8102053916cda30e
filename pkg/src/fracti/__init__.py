"""FRACTI: provenance-tracked workflow engine for reproducible experiments."""

__version__ = "0.1.0"
