"""Decomposition-based spatio-temporal graph forecasting on numpy."""
from __future__ import annotations

__version__ = "0.1.0"
