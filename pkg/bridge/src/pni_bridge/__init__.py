"""Backbone feature export and map refinement bridge for the pni pipeline."""

__version__ = "0.1.0"
