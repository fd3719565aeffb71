#!/usr/bin/env python3
"""Entry point for the prefill-lab command line."""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.cli import main  # noqa: E402


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
