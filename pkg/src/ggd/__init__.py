"""Greedy de-bias training of classifiers against biased ensembles."""

__version__ = "0.1.0"
