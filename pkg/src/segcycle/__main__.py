"""Allow `python -m segcycle`."""

import sys

from .cli import main

sys.exit(main())
