"""Setup. Required for the installation in editable mode."""

from setuptools import setup

setup()
