"""Trace-driven simulation of refresh-query scheduling under a per-slot time budget."""

__version__ = "0.1.0"
