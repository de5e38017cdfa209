"""Train the four zoo models and write checkpoints.

    python scripts/train_zoo.py [--config configs/desk.json] [--out checkpoints]
"""

import sys

from fpalab.cli import main

if __name__ == "__main__":
    args = sys.argv[1:]
    if "--config" not in args:
        args = ["--config", "configs/desk.json", *args]
    sys.exit(main(["train", "-v", *args]))
