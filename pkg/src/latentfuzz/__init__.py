"""Coverage-guided fuzzing of neural-network classifiers by latent-space traversal."""

__version__ = "0.1.0"
