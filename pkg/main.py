#!/usr/bin/env python3
"""
SepBART

Command-line entry point for fitting the separable BART model and
computing effect-modifier importance from its posterior draws.
"""

import sys
from sepbart.cli import main

if __name__ == "__main__":
    sys.exit(main())
