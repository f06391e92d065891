"""
densitymap — Log-normal density-field reconstruction from masked Poisson counts.
"""

__version__ = "0.1.0"
