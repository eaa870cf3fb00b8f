"""Joint group-relative RL for a text policy and a flow-matching generator."""

__version__ = "0.1.0"
