import sys

from depthpatch.cli import main

sys.exit(main())
