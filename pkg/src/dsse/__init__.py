"""Time-synchronized state estimation lab for incompletely observed unbalanced feeders."""

__version__ = "0.1.0"
