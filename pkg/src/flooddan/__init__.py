"""FloodDAN: unsupervised domain adaptation for runoff forecasting across watersheds."""

__version__ = "0.1.0"
