"""Crop-type mapping from satellite image time series with a hybrid 3D/1D CNN."""

__version__ = "0.1.0"
