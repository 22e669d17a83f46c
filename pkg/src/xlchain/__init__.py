"""Cross-lingual sequential fine-tuning for offensive-language classification, from scratch on numpy."""

__version__ = "0.1.0"
