#!/usr/bin/env python3
"""Render one figure from experiment CSV artifacts.

Thin executable wrapper; the implementation lives in the ``figrender``
package next to this script, which Python puts on the path automatically
when the script is run by file name.
"""

import sys

from figrender.cli import main

if __name__ == "__main__":
    sys.exit(main())
