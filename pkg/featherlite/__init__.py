"""Featherlite: lightweight CNN classifiers built from a dual-branch model."""

__version__ = "0.1.0"
