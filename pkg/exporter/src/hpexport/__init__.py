"""Frozen ViT patch-feature exporter.

Extracts per-image patch features (two photometrically augmented views) and
head-averaged last-layer attention rows from a frozen vision transformer,
and writes them as HPFS v1 shards for the training engine.
"""

__version__ = "0.1.0"
