"""patchforge: dual field-of-view patch CNN lesion detection toolkit."""

__version__ = "0.1.0"
