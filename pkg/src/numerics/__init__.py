"""Dense tensor primitives."""
