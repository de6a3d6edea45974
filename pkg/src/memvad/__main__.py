import sys

from memvad.cli import main

sys.exit(main())
