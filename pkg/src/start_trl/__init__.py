"""Self-supervised trajectory representation learning over road networks."""

__version__ = "0.1.0"
