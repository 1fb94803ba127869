import sys

from crophybrid.cli import main

sys.exit(main())
