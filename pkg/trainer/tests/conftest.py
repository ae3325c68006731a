import sys
from pathlib import Path

TRAINER_DIR = Path(__file__).resolve().parent.parent
if str(TRAINER_DIR) not in sys.path:
    sys.path.insert(0, str(TRAINER_DIR))
