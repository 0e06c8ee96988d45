"""Synthetic cellular twin, conditional diffusion world model, and sleep/offload agent."""

__version__ = "0.1.0"
