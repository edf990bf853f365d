"""Scene-graph expression tokens for a toy vision-language model, built on a small numpy autodiff."""

__version__ = "0.1.0"
