"""Desk-scale neural machine translation with cluster-recalibrated attention.

A from-scratch encoder-decoder translation stack: dense tensors with
reverse-mode autodiff, transformer layers with an additive attention-bias
hook, per-sentence k-means over source embeddings feeding that hook,
Adam training, greedy decoding, and exact BLEU reporting.
"""

__version__ = "0.1.0"
