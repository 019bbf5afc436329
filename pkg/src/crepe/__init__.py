"""Coordinate-aware end-to-end document parser at desk scale."""
__version__ = "0.1.0"
