"""Activation-geometry diagnostics, steering-vector construction and budgeted layer/coefficient search."""

from __future__ import annotations

__version__ = "0.1.0"
