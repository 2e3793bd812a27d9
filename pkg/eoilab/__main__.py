"""Allow ``python -m eoilab``."""

import sys

from eoilab.cli import main

sys.exit(main())
