import sys

from gradloom.cli import main

sys.exit(main())
