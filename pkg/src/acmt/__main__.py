"""Allow ``python -m acmt``."""
import sys

from .cli import main

sys.exit(main())
