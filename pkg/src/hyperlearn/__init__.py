"""Learning on dynamically attributed, heterogeneous entities that interact
through typed, time-stamped hyperedges."""

__version__ = "0.1.0"
