#!/usr/bin/env python3
"""Main entry point for unified no-reference quality assessment.

Trains one model that scores audio, image, video and audio-visual media,
evaluates it on repeated splits and held-out databases, and renders reports.
"""

import os
import sys

# Add the current directory to Python path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from core.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
