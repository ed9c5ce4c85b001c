"""Two-view coronary tree reconstruction: projection simulation, WCGAN-GP model, evaluation."""

__version__ = "0.1.0"
