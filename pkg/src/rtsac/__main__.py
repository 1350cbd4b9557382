import sys

from rtsac.cli import main

sys.exit(main())
