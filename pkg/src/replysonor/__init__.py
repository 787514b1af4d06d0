"""
ReplySonor - Smart Reply suggestion engine.

Ranks a fixed set of short replies for an incoming message with n-gram
embedding models trained on multiple in-batch negatives, biases them with a
response language model and serves them through a hierarchically quantized
index.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
