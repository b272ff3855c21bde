import sys

from fedgca.cli import main

sys.exit(main())
