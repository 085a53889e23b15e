"""Unsupervised change detection between co-registered images from different sensors.

Two convolutional autoencoders share a code space. Training aligns their
codes using a cross-modal affinity prior, so each domain can be translated
into the other; the translation residual gives the change map.
"""

__version__ = "0.1.0"
