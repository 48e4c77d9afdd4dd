"""Long-context encoder workbench: packing, pretraining recipe, fine-tuning protocol and throughput bench."""

__version__ = "0.1.0"
