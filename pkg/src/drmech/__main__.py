import sys

from drmech.cli import main

sys.exit(main())
