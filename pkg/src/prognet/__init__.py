"""Progressive neural networks with lateral adapters, trained by advantage actor-critic."""

__version__ = "0.1.0"
