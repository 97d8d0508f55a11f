"""fogml test suite."""
