"""Clinical-knowledge-driven dual-branch transformer for brain tumour segmentation."""

__version__ = "0.1.0"
