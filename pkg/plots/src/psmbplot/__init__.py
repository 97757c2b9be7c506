"""Figures for pretraining exports.

Reads the trainer's text artifacts (metrics JSONL, ablation CSV, embeddings
CSV) and renders static images.  This package never imports the trainer; the
file formats documented in `io` are the whole contract between the two.
"""

__version__ = "0.1.0"
