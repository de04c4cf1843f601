"""Single-image scene layout by registering shape proposals to depth and mask evidence."""

__version__ = "0.1.0"
