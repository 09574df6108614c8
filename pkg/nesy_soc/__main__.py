import sys

from nesy_soc.cli import main

sys.exit(main())
