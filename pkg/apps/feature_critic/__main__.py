#!/usr/bin/env python3
"""
Entry point for apps.feature_critic module execution.
Enables running as: python -m apps.feature_critic
"""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
