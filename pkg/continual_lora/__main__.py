import sys

from continual_lora.main import main

sys.exit(main())
