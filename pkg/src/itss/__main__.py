import sys

from itss.harness.cli import main

sys.exit(main())
