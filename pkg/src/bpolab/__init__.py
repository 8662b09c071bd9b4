"""Backpropagation-based policy optimization through Markovian, history and
actions world models, on a small reverse-mode autodiff engine."""

__version__ = "0.1.0"
