"""Two-branch occlusion-aware detector trained with a feature-modulation loss."""

__version__ = "0.1.0"
