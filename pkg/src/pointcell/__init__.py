"""Point-annotated cell recognition: detection, classification, and a density baseline."""

__version__ = "0.1.0"
