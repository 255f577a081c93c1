"""Weight-balancing laboratory for long-tailed recognition on small networks."""

__version__ = "0.1.0"
