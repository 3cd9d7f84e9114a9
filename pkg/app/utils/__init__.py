"""
Utilities package for the repository.
"""

