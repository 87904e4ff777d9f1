import os
from pathlib import Path

TIMEOUT = int(os.getenv('HOMOGENLAB_TEST_TIMEOUT', 60))
HELPER = str(Path(__file__).parent / 'helper.py')
