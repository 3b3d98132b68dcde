"""Reward-free self-finetuning testbed for RAN slice PRB control."""

__version__ = "0.1.0"
