"""On-disk dataset layout, letterboxing, weights files and the synthetic generator."""
