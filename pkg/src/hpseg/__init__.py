"""Hidden-positive contrastive training engine for unsupervised semantic segmentation heads.

Operates on precomputed ViT patch features (HPFS shards): mines global hidden
positives against task-agnostic and task-specific reference pools, trains a
small segmentation/projection head stack with multi-positive contrastive
objectives, and routes gradients to attention-selected local neighbors.
"""

__version__ = "0.1.0"
