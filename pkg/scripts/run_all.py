"""Run every shipped config through the CLI and tabulate the outcome.

    python scripts/run_all.py [--experiment value-equivalence] [--out runs] [--configs a b ...]

Each run writes into ``<out>/<config>/<experiment>``; the table lists
exit codes and failed bands.
"""

import argparse
import json
from pathlib import Path

from mmvlab.cli import main as cli_main
from mmvlab.runner import EXPERIMENTS

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--experiment", default="value-equivalence", choices=EXPERIMENTS)
    ap.add_argument("--out", default="runs")
    ap.add_argument("--configs", nargs="*", default=None, help="config stems (default: all)")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    stems = args.configs or sorted(p.stem for p in (ROOT / "configs").glob("*.json"))
    rows = []
    for stem in stems:
        out = Path(args.out) / stem / args.experiment
        code = cli_main(["run", str(ROOT / "configs" / f"{stem}.json"), "--experiment",
                         args.experiment, "--out", str(out), "--workers", str(args.workers)])
        summary = json.loads((out / "summary.json").read_text())
        failed = [b["name"] for b in summary["bands"] if not b["passed"]]
        rows.append((stem, code, summary["status"], failed))

    print()
    print(f"{'config':<26} {'exit':>4}  status")
    for stem, code, status, failed in rows:
        print(f"{stem:<26} {code:>4}  {status}" + (f"  failed: {', '.join(failed)}" if failed else ""))
    return max(code for _, code, _, _ in rows)


if __name__ == "__main__":
    raise SystemExit(main())
