"""Feature-Critic Meta-Learning for Domain Generalisation Package."""

__version__ = "0.1.0"
