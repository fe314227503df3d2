"""Automatic ground control point generation from multi-aspect SAR stacks.

The package chains candidate detection (persistent-scatterer fusion, optical
templates, road-side scatterers), sub-pixel timing extraction, radar timing
correction, and multi-geometry positioning with variance component
estimation, plus a synthetic scene generator that makes the whole chain
testable end to end.
"""

__version__ = "0.1.0"
