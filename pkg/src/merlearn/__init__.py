"""Meta-learning with mutual-exclusiveness regularization (MANN and MAML)."""

__version__ = "0.1.0"
