"""Boundary-aware segmentation laboratory.

SLIC superpixels, dense-CRF mean-field inference, a feature-space CRF
layer with analytic gradients, and the class-weight geometry diagnostics
built on top of them.
"""

__version__ = "0.1.0"
