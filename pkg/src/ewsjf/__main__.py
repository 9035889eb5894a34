import sys
from ewsjf.cli import main

sys.exit(main())
