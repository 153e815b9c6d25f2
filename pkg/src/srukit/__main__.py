import sys

from srukit.cli import main

sys.exit(main())
