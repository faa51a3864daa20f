"""Run every bench sweep against one checkpoint and collect the reports under results/.

    python3 scripts/run_sweeps.py --ckpt checkpoints/default.ckpt [--no-timing]

Each sweep goes through the CLI so that its output directory carries a
manifest that can be replayed with ``deskcache bench --config``.
"""

import argparse
import sys
from pathlib import Path

from deskcache.cli import main as cli

SWEEPS = {
    "N": ["--axis", "N"],
    "branch": ["--axis", "branch", "--cache-N", "5"],
    "cp": ["--axis", "cp", "--cache-N", "5"],
    "table6": ["--axis", "table6"],
}


def run(ckpt: str, out: Path, steps: int, samples: int, timing: bool, only: list[str]) -> int:
    for name in only:
        args = ["bench", "--ckpt", ckpt, "--steps", str(steps), "--samples", str(samples),
                "--out", str(out / name), *SWEEPS[name]]
        if not timing:
            args.append("--no-timing")
        print(f"== {name}", flush=True)
        code = cli(args)
        if code:
            return code
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", default="checkpoints/default.ckpt")
    ap.add_argument("--out", default="results/sweeps")
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--samples", type=int, default=256)
    ap.add_argument("--no-timing", action="store_true")
    ap.add_argument("--only", nargs="*", choices=list(SWEEPS), default=list(SWEEPS))
    a = ap.parse_args()
    sys.exit(run(a.ckpt, Path(a.out), a.steps, a.samples, not a.no_timing, a.only))
