"""Global instance-search tracking with a query-guided two-stage detector."""

__version__ = "0.1.0"
