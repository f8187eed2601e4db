"""Point-level segmentation of battery electrode-plate endpoints in X-ray images."""
__version__ = "0.1.0"
