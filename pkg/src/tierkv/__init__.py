"""Utility-driven KV-cache placement across a DRAM/SSD hierarchy, plus a trace simulator."""

__version__ = "0.1.0"
