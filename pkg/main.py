#!/usr/bin/env python3
"""
DPKE - semi-supervised 3D detection on synthetic point clouds
Main entry point for the command-line tool.
"""

import sys
import os

# Add the project root to Python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from dpke.cli import main as cli_main


def main():
    """Run the dpke command line and exit with its status."""
    try:
        sys.exit(cli_main())
    except KeyboardInterrupt:
        print("\nInterrupted by user.", file=sys.stderr)
        sys.exit(130)


if __name__ == "__main__":
    main()
