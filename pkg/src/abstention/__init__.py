"""Score-based classification with abstention: losses, trainers and consistency checks."""

__version__ = "0.1.0"
