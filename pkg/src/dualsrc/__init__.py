"""Dual-sourcing inventory control with differentiable simulation and capacity coordination."""

__version__ = "0.1.0"
