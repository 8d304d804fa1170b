"""Multi-orbit space-based data center simulator."""

__version__ = "0.1.0"
