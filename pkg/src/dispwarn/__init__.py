"""Early-warning risk indices for sudden rises in monthly displacement flows."""

__version__ = "0.1.0"
