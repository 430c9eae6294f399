"""Multi-view graph regression with layerwise causal/trivial peeling."""

__version__ = "0.1.0"
