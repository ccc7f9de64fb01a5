"""Neural vector Lyapunov-Razumikhin certificates for delayed interconnected systems."""

__version__ = "0.1.0"
