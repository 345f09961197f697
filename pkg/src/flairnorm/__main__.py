import sys

from flairnorm.cli import main

sys.exit(main())
