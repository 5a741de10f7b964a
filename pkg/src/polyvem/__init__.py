"""Virtual element solver for coupled nonlinear convection-diffusion-reaction systems."""

__version__ = "0.1.0"
