"""Boundary spectral data experiments for Robin Schrodinger operators on boxes."""
