import sys

from soco.cli import main

sys.exit(main())
