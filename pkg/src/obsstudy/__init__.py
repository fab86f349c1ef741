"""Average treatment effect estimation under informative treatment assignment."""

__version__ = "0.1.0"
