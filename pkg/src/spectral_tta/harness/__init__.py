"""Experiment engine: data synthesis, corruption streams, runs, reporting."""
