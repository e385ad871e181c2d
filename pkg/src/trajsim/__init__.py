"""Self-supervised trajectory similarity learning.

Contrastive pretraining of a dual-feature attention encoder over GPS
trajectories, with heuristic measures, grid cell embeddings, kNN search,
fine-tuning and evaluation utilities.
"""

__version__ = "0.1.0"
