"""Length-aware query suppression for DETR-style temporal sentence grounding."""

__version__ = "0.1.0"
