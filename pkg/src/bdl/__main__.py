import sys

from bdl.cli import main

sys.exit(main())
