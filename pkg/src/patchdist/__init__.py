"""Distribution-optimized placement of fixed-pattern adversarial patches."""

__version__ = "0.1.0"
