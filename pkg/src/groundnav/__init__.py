"""Instruction-grounded navigation: autodiff engine, grid environment,
attention networks, actor-critic trainer, and the CLI harness."""

__version__ = "0.1.0"
