"""Local tracking vs. edge detection: event simulator and DQN trainer."""

__version__ = "0.1.0"
