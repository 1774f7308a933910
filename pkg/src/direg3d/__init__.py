"""Stereo fisheye hand tracking at desk scale.

Pipeline: synthetic stereo-fisheye data generation -> jointly trained
parametric / non-parametric hand regressor with metadata side input ->
MKPE / AUC evaluation with mono and stereo inference paths.
"""

__version__ = "0.1.0"
