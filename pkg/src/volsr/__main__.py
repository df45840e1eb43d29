"""Allow ``python -m volsr`` as an alias for the ``volsr`` script."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
