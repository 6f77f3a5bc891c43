"""Two-pathway GRU sentence encoder with omission, regression, probing and MI analyses."""

__version__ = "0.1.0"
