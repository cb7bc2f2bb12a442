"""Cross-modal LiDAR/camera semantic segmentation on a small synthetic domain.

Tree-guided label propagation, confidence-gated cross-modal distillation,
a compact two-stream network and the tooling around them.
"""
__version__ = "0.1.0"
