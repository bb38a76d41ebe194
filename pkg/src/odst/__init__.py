"""Out-distribution aware self-training on synthetic open-world mixtures."""

__version__ = "0.1.0"
