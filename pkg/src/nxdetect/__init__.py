"""Toolkit for detecting algorithmically generated domain names in NXDOMAIN traffic."""

from __future__ import annotations

__version__ = "0.1.0"
