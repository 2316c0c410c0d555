"""Demand paging for LLM context windows: a Messages-API proxy plus offline replay tools."""
from __future__ import annotations

__version__ = "0.1.0"
