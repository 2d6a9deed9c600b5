"""Test-time support-set tuning for zero-shot video classification."""
__version__ = "0.1.0"
