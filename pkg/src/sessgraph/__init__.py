"""Feature-rich item co-occurrence graphs, self-supervised item embeddings,
and their use in session-based recommenders."""

__version__ = "0.1.0"
