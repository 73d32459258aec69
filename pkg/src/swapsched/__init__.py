"""Swap scheduling and minibatch selection for memory-bound DNN training."""

__version__ = "0.1.0"
