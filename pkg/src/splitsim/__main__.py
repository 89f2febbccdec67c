import sys

from splitsim.cli import main

sys.exit(main())
