"""Joint entity and relation extraction with a CRF tagger and multi-head selection."""

__version__ = "0.1.0"
