import sys

from ovml.cli import main

sys.exit(main())
