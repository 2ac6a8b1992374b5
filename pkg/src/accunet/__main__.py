import sys

from accunet.cli import main

sys.exit(main())
