"""Two-stage camera localization: a pose regressor prior refined against a radiance field."""

__version__ = "0.1.0"
