"""Cascaded Q-Former video captioner: a frozen soft-prompted LM, a text auto-encoder
for token-level alignment, and everything needed to train and score it on a
synthetic video world."""

__version__ = "0.1.0"
