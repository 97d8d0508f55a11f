"""Experiment runner: configuration, protocol dispatch and results."""
