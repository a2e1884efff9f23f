"""Semi-supervised 3D hemorrhage segmentation with Laplacian-pyramid difference learning."""

__version__ = "0.1.0"
