"""Seedable RF sphere-reconstruction workbench: room simulation with RIS
panels, per-antenna multipath features and a set-prediction model that
recovers material-labelled spheres."""

__version__ = "0.1.0"
