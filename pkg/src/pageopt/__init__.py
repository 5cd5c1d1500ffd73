"""Page-level module ranking workbench."""

__version__ = "0.1.0"
