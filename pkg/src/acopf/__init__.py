"""AC optimal power flow: local interior-point and global branch-and-bound."""

__version__ = "0.1.0"
