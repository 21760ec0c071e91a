"""Implicit adversarial feature augmentation with a meta-learned policy."""

__version__ = "0.1.0"
