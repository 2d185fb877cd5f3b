import sys
from pathlib import Path

# Add project root to path
project_root = str(Path(__file__).parent)
sys.path.append(project_root)

from src.cli import run

if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))
