"""Antenna subarray selection for direction finding with CRB-labelled classifiers."""

__version__ = "0.1.0"
