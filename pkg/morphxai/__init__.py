"""
MorphXAI - explainable parasite detection.
A DETR-style detector whose decoder layers also predict five morphological
attributes per parasite, turned into structured per-detection reports.
"""

__version__ = "0.1.0"
