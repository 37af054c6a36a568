"""Desk-scale deep-learning downscaling of daily temperature grids.

Grids, resampling, a small reverse-mode autodiff engine, EDSR and FNO models,
training, climate indicators, station-anchored evaluation, and a synthetic
data generator.
"""

__version__ = "0.1.0"
