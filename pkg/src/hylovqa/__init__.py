"""Hypernetwork-generated low-rank adapters with a dual anchor memory for continual VQA."""

__version__ = "0.1.0"
