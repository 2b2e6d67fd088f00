import sys

from respnet.cli import main

sys.exit(main())
