import sys
from pathlib import Path

# make the shared helpers importable as ``support``
sys.path.insert(0, str(Path(__file__).parent))
