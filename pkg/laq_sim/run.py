#!/usr/bin/env python3
"""
LAQ Simulator
Standalone entry point script.
"""

import sys

from laq_sim.cli import main


if __name__ == "__main__":
    sys.exit(main())
