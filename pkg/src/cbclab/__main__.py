"""Run the command-line interface with ``python -m cbclab``."""

import sys

from .cli import main

sys.exit(main())
