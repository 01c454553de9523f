"""Typed relational environment graphs that evolve, with executable sandboxes,
task generation and evaluation."""

__version__ = "0.1.0"
