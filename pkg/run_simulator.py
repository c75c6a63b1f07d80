#!/usr/bin/env python3
"""
Startup script for the MHD ensemble simulator
"""

import sys
import os

# Add the project root to Python path
project_root = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, project_root)

from simulator.main import cli

if __name__ == "__main__":
    sys.exit(cli())
