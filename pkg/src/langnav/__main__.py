import sys

from .iface import main

sys.exit(main())
