"""protgo: transformer fusion pipeline for GO-term annotation of proteins."""

__version__ = "0.1.0"
