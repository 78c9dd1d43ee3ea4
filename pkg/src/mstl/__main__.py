import sys

from mstl.cli import main

sys.exit(main())
