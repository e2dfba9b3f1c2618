"""Monte Carlo Picard solver and constant certificates for BSDEs with product generators."""

__version__ = "0.1.0"
