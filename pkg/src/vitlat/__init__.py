"""Operation-level latency prediction for vision transformer search spaces."""

__version__ = "0.1.0"
