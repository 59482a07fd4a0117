"""Deep replica models and policy-gradient cruise control for truck longitudinal dynamics."""

__version__ = "0.1.0"
