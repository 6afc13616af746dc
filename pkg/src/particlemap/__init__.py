"""Parameter-conditioned generative sampling of particle-system invariant
measures, trained by discrete 2-Wasserstein minimization."""

__version__ = "0.1.0"
