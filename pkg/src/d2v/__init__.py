"""Self-distillation of masked inputs onto layer-averaged EMA-teacher targets."""

__version__ = "0.1.0"
