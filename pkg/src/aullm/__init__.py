"""Micro-expression action unit detection: 3D CNN evidence, AU relation graph, LoRA-adapted reasoner."""

__version__ = "0.1.0"
