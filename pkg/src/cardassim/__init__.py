"""Joint state and parameter estimation for a coupled cable/fiber electromechanical model."""

__version__ = "0.1.0"
