import sys

from findlab.cli import main

sys.exit(main())
