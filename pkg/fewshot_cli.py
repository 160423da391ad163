#!/usr/bin/env python3
"""
FEWSHOT-AD CLI LAUNCHER
=======================
Run the pipeline from a checkout without installing the package.

Usage:
    python fewshot_cli.py synth --out data
    python fewshot_cli.py eval data --config run_config.json --out runs/
"""

import sys

from fewshot_ad.cli import main

if __name__ == '__main__':
    sys.exit(main())
