"""Quantitative investment cycle toolkit: market data, factor models, signal
selection, Black-Litterman construction, rebalancing, transaction cost
analysis and performance attribution."""

__version__ = "0.1.0"
