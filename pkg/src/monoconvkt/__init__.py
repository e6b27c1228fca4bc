"""Desk-scale knowledge tracing with monotonic convolutional attention.

A framework-free implementation: a small float64 autodiff tensor library,
an interaction-log data pipeline with CTT difficulty buckets, a pre-LN
encoder with four attention variants, a five-fold cross-validation
trainer, and interpretability exports.
"""

__version__ = "0.1.0"
