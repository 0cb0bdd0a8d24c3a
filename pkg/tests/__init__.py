"""Test suite for kiln."""

__all__ = []
