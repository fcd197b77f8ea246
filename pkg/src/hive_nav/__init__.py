"""Hierarchical multi-agent navigation on a generated grid world."""

from __future__ import annotations

__version__ = "0.1.0"
