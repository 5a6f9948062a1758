"""Desk-scale workbench for total lung volume regression from chest projections."""

__version__ = "0.1.0"
