"""Text classifiers trained under label shortage with adversarial and consistency regularization."""

__version__ = "0.1.0"
