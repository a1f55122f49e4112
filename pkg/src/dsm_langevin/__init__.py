"""Linear denoising score matching trained by SGD and sampled by ULA:
closed-form error theory and Monte Carlo checks for Gaussian data."""

__version__ = "0.1.0"
