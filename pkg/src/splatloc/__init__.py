"""Visual localization against Gaussian-splat scenes."""

__version__ = "0.1.0"
