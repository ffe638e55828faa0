"""Detection of query-based black-box attacks from the geometry of query updates."""

__version__ = "0.1.0"
