"""Run a benchmark config and print the AUC table.

    python3 scripts/run_benchmark.py configs/ring.ini --out results/ring
"""
import argparse
import sys
from pathlib import Path

from diffad.cli import main


def run(config: str, out: str, jobs: int) -> int:
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    code = main(["bench", "--config", config, "--out-csv", str(root / "results.csv"),
                 "--out-md", str(root / "table.md"), "--jobs", str(jobs)])
    print((root / "table.md").read_text())
    return code


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config")
    p.add_argument("--out", default="results")
    p.add_argument("--jobs", type=int, default=1)
    a = p.parse_args()
    sys.exit(run(a.config, a.out, a.jobs))
