"""Workflow-aware scheduling of multi-step agent inference: policies and a cluster simulator."""

__version__ = "0.1.0"
