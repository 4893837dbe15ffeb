"""Lifelong federated reinforcement learning for simulated lidar navigation."""

__version__ = "0.1.0"
