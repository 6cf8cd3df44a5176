"""Block attention at toy scale: masks, KV reuse, segmentation and distillation."""

__version__ = "0.1.0"
