"""Entry point for python -m varfilt."""

from varfilt.cli import main

main()
