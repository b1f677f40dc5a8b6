"""Bidirectional test-time adaptation for rPPG heart-rate estimation.

Everything runs on numpy: a small reverse-mode autodiff engine, a compact
convolutional HR estimator, synthetic streams with controllable domain
shift, the consistency priors, and the PA/RS adapter.
"""
__version__ = "0.1.0"
