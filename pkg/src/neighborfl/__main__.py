import sys

from neighborfl.cli import main

sys.exit(main())
