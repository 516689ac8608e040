"""Multi-granularity mixture-of-experts image restoration at desk scale."""

__version__ = "0.1.0"
