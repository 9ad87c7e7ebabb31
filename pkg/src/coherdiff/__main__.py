import sys

from coherdiff.cli import main

sys.exit(main())
