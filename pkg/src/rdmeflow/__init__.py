"""Spatial stochastic reaction-diffusion simulation with parallel ensembles."""
__version__ = "0.1.0"
