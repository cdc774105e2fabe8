import sys

from dkn.cli import main

sys.exit(main())
