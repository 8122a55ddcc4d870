"""Multi-task valence and emotion-carrier classification over functional
units of personal narratives."""

__version__ = "0.1.0"
