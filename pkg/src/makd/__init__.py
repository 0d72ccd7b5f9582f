"""Low-rank transformer students distilled from a dense teacher on several aspects at once."""

__version__ = "0.1.0"
