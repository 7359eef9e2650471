"""Multi-modal VLAD aggregation for untrimmed video classification."""

from __future__ import annotations

from .const import VERSION

__version__ = VERSION
