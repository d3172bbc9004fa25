#!/usr/bin/env python3
"""Command-line entry point: ``python ion_cavity.py <command> [--config FILE] [--out DIR] [--threads N]``."""
import sys

from app.cli import main

if __name__ == "__main__":
    sys.exit(main())
