"""From-scratch parameter-efficient fine-tuning (LoRA, adapters, prefix
tuning, QLoRA) for a minimal transformer, with a capability-retention
evaluation toolkit."""

__version__ = "0.1.0"
