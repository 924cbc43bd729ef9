"""Cross-modal weak supervision: transfer labels from an existing modality to a new one."""

__version__ = "0.1.0"
