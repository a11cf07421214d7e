"""fecim: ferroelectric-FinFET compute-in-memory simulator."""

__version__ = "0.1.0"
