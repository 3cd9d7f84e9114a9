"""
Application package: shared utilities plus the video instance segmentation pipeline.
"""
