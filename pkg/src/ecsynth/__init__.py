"""Error-correction data synthesis and domain-adaptive reweighting toolkit."""

__version__ = "0.1.0"
