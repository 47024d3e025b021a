import sys

from sosvi.harness import main

sys.exit(main())
