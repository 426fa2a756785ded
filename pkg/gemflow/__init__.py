"""GemFlow: particle flows driven by deep density-ratio fitting"""

__version__ = "0.1.0"
