import sys
from pathlib import Path

# Lets test modules import the shared oracles and rewrite helpers.
sys.path.insert(0, str(Path(__file__).parent))
