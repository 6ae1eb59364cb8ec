"""Locally covariant Klein-Gordon field on 1+1 cylinder spacetimes."""
__version__ = "0.1.0"
