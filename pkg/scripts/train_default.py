"""Train the default toy model (about 5-6 minutes on one core) into checkpoints/."""

import sys

from deskcache.cli import main as cli

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "checkpoints/default.ckpt"
    sys.exit(cli(["-v", "train", "--out", out]))
