import sys

from trackselect.cli import main

sys.exit(main())
