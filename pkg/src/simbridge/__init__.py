"""simbridge: middleware connecting digital twins to heterogeneous simulators
over a uniform simulation protocol (batch, streaming and physical-twin
simulation patterns)."""

__version__ = "0.1.0"
