"""Two-stage semantic-guided diffusion classifier for ordinal grading,
built on a small tape-based autodiff kit."""

__version__ = "0.1.0"
