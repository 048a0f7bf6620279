"""Cubemap fisheye geometry and a synthetic monocular VO pipeline."""

__version__ = "0.1.0"
