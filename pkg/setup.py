# Legacy entry point for `pip install -e .` with pip < 21.3.
# Metadata, dependencies and the morphxai console script live in pyproject.toml.
from setuptools import setup

setup()
