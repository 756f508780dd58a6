"""Trawl process toolkit: simulation, pairwise-likelihood fitting, forecasting."""

from . import cv, dist, forecast, infer, mcgrad, pairwise, trawl

__all__ = ["cv", "dist", "forecast", "infer", "mcgrad", "pairwise", "trawl"]
__version__ = "0.1.0"
