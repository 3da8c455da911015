import os
import sys

# make the shared test helpers (fdcheck, taskstats) importable regardless
# of how pytest is invoked
sys.path.insert(0, os.path.dirname(__file__))
