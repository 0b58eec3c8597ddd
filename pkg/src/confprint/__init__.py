"""confprint: classifier fingerprinting with conferrable adversarial examples."""

__version__ = "0.1.0"
