"""Step-to-step similarity of the cached feature for every skip branch.

    python3 scripts/run_observation.py --ckpt checkpoints/default.ckpt

Writes one analyze directory per branch (matrix, fraction curve, heatmap) and
prints the adjacent vs distant means.
"""

import argparse
import sys
from pathlib import Path

from deskcache.cli import main as cli

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", default="checkpoints/default.ckpt")
    ap.add_argument("--out", default="results/observation")
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--sampler", choices=("ddim", "ddpm"), default="ddim")
    a = ap.parse_args()
    for m in (1, 2, 3):
        print(f"branch {m}: ", end="", flush=True)
        code = cli(["analyze", "--ckpt", a.ckpt, "--sampler", a.sampler, "--steps", str(a.steps),
                    "--branch", str(m), "--out", str(Path(a.out) / f"branch{m}")])
        if code:
            sys.exit(code)
