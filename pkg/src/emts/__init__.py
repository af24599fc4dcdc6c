"""Expert-guided motion-encoding tree search over a toy driving stack."""

__version__ = "0.1.0"
