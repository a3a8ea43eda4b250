import sys

from fedstr.cli import main

sys.exit(main())
