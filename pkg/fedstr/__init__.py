"""FEDSTR, a NOSTR-based marketplace where customers pay providers to train models."""

__version__ = "0.1.0"
