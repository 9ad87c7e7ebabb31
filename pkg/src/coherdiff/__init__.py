"""Object-coherence conditioning for layout-to-image diffusion, at toy scale."""

__version__ = "0.1.0"
