import sys

from sinkflow.cli import main

sys.exit(main())
