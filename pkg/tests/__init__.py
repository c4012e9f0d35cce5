"""Tests for featherlite."""
