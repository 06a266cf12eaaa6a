"""Provides checkpointing, evaluation and report emission."""
