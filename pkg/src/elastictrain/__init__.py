"""Elastic synchronous data-parallel training runtime and GPU-cluster scheduling simulator."""

__version__ = "0.1.0"
