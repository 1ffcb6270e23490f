"""
Test package for SepBART.

This package contains test modules for each component of the separable model.
"""
