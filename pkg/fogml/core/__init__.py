"""fogml core modules: models, numerics and randomness."""
