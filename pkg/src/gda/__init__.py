"""Two-stage globally-diverse adversarial attack on dual-encoder retrieval models."""

__version__ = "0.1.0"
