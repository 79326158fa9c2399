import sys

from dmtnet.cli import main

sys.exit(main())
