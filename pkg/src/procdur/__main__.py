import sys

from procdur.cli import main

sys.exit(main())
