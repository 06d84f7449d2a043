"""Allow ``python -m xmre`` as an alias for the ``xmre`` console script."""

import sys

from xmre.cli import main

sys.exit(main())
