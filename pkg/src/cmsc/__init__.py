"""Long-term boundary image prediction: model, billiard simulator, formats, metrics, CLI."""

__version__ = "0.1.0"
