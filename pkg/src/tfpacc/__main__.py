import sys

from tfpacc.cli import main

sys.exit(main())
