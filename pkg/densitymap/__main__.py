import sys

from densitymap.cli import main

sys.exit(main())
