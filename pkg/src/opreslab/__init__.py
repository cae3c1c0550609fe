"""Laboratory for training and probing Fourier neural operators across resolutions."""
__version__ = "0.1.0"
