"""
slimdet

A pruning-aware YOLO toolkit: Darknet network descriptions and weights,
a NumPy inference and toy training engine, BN-gamma channel pruning,
mosaic augmentation and mAP/FPS evaluation.
"""

__version__ = "0.1.0"
