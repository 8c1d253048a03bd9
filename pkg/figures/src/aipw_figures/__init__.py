"""Rendering of cross-fit AIPW experiment CSVs into publication figures."""

from .render import FIGURE_KINDS, FigureSpec, SchemaError, render

__all__ = ["FigureSpec", "SchemaError", "render", "FIGURE_KINDS"]

__version__ = "0.1.0"
