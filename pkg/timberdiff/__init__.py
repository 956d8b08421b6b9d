"""Scan-to-CAD deviation analysis for timber assemblies and joints."""

__version__ = "0.1.0"
