"""
Build structure: setuptools is declared as the build system in pyproject.toml and all metadata lives in setup.cfg, so
that other tools (nox, flake8, pytest) read it too. This file only wires the git-based version.
"""
from setuptools import setup


setup(
    use_scm_version={
        "write_to": "odecheck/_version.py"
    },  # we can't put `use_scm_version` in setup.cfg yet unfortunately
)
