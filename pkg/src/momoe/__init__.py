"""Momentum-accelerated sparse mixture-of-experts dynamics."""

__version__ = "0.1.0"
