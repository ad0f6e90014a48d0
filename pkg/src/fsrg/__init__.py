"""Few-shot structured report generation with prompt-initialised classifiers."""

__version__ = "0.1.0"
