import sys

from toneunit.cli import main

sys.exit(main())
