"""Desk-scale laboratory for compilation-induced floating-point deviation in small classifiers."""

__version__ = "0.1.0"
