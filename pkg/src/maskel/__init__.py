"""Mask-to-X-ray synthesis: phantom data, diffusion sampling, residual-shift
super-resolution, masked-autoencoder pretraining and the two-encoder stage-2
translator, with metrics and a command-line driver."""

__version__ = "0.1.0"
