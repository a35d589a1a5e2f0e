"""Dataset condensation by matching Bezier surrogates of SGD trajectories."""

__version__ = "0.1.0"
