"""
s2me: scribble-supervised polyp-style segmentation with a spatial and a
spectral branch trained by mutual teaching and entropy-guided ensembling.
"""

__version__ = "0.1.0"
