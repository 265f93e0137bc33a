"""Semantic-guided vision transformer for zero-shot learning.

A small, self-contained stack: a float64 autodiff engine, a mini ViT
backbone, semantic token enhancement with score-based token pruning and
fusion, attribute-space losses, calibrated zero-shot evaluation, a
synthetic attribute-grid benchmark, and a CLI tying it together.
"""

__version__ = "0.1.0"
