"""Allow ``python3 -m pando`` as an alias for the ``pando`` script."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
