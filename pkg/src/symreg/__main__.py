import sys

from symreg.harness.cli import main

sys.exit(main())
