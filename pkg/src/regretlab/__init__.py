"""Tabular episodic-RL regret laboratory built around the batch-refresh MVP learner."""

__version__ = "0.1.0"
