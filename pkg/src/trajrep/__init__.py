"""Annotation-efficient trajectory representation learning toolkit."""

__version__ = "0.1.0"
