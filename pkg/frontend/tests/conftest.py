"""Make the package importable straight from the source tree.

The tests prefer an installed ``figrender`` but fall back to the sources
one directory up, so the suite also runs from a fresh checkout.
"""

import sys
from pathlib import Path

FRONTEND_ROOT = Path(__file__).resolve().parents[1]
if str(FRONTEND_ROOT) not in sys.path:
    sys.path.insert(0, str(FRONTEND_ROOT))
