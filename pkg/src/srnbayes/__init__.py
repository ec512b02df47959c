"""Bayesian inference for stochastic reaction networks via linear-noise metamodels."""
