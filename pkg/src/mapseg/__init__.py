"""Domain-adaptive 3D segmentation with masked autoencoding pretraining,
masked pseudo-labeling, and global-local feature fusion."""

__version__ = "0.1.0"
