import sys

from nss.cli import main

sys.exit(main())
