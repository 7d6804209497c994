"""Two-tower embedding recommender with batch retrieval, at desk scale."""

__version__ = "0.1.0"
