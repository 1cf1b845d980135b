"""Desk-scale benchmark for self-supervised pretraining of endoscopy backbones."""

__version__ = "0.1.0"

TASK_KINDS = ("classification", "detection", "segmentation", "depth")
