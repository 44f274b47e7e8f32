import sys

from temde.cli import main

sys.exit(main())
