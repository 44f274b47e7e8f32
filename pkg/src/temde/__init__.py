"""Trainable sketch-based global representations for cross-modal retrieval."""
