import sys

from timberdiff.main import cli_main

sys.exit(cli_main())
