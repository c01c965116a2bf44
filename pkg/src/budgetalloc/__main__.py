import sys

from budgetalloc.cli import main

sys.exit(main())
