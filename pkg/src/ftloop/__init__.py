"""Closed-loop fine-tuning orchestration on a deterministic toy task."""

__version__ = "0.1.0"
