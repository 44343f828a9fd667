import sys

from regtext.expcli import main

sys.exit(main())
