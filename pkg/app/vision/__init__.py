"""
Online video instance segmentation: synthetic data, perception, residual fusion,
object graph, tracking, metrics and the end-to-end harness.
"""
