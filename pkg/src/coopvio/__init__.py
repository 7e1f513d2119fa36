"""Distributed multi-robot visual-inertial cooperative localization toolkit."""

__version__ = "0.1.0"
