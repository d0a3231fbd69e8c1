"""Number-query slice length sweep (L_s in 1, 10, 100) for the full decoder.

    python scripts/query_length.py --seeds 0 1 2 --out runs/query_length
"""

import argparse
import csv
import json
import logging
from pathlib import Path

from ngrec.experiment import SLICE_LENGTHS, ToyConfig, run_grid, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--lengths", type=int, nargs="+", default=list(SLICE_LENGTHS))
    ap.add_argument("--out", default="runs/query_length")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    rows = summarize(run_grid(ToyConfig(), args.seeds, ["none"], args.lengths, out_dir=out))
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    for r in rows:
        print(json.dumps(r))


if __name__ == "__main__":
    main()
