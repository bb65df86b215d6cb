"""Per-clip inference latency of the CF, AF and CAF fusion strategies.

All three models share the same context and feature blocks at desk-recipe
width. Fusion-only figures time the fusion block and classifier on
precomputed embeddings; full figures time the whole forward pass. Absolute
numbers depend on the machine and are reported, not judged.
"""

import argparse
import json

from drivernet.recipes import DESK, latency_report


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--clips", type=int, default=64, help="clips timed per strategy")
    ap.add_argument("--seed", type=int, default=0, help="seed for weights and clips")
    ap.add_argument("--out", default="latency.json", help="JSON report path")
    args = ap.parse_args()
    report = latency_report(DESK, args.clips, args.seed)
    print(f"{'fusion':<6} {'params':>9} {'fusion-only ms (median/p95)':>28} {'full ms (median/p95)':>22}")
    for fusion, r in report.items():
        only, full = r["fusion_only"], r["full"]
        print(f"{fusion:<6} {r['parameters']:>9,} {only['median']:>19.3f} / {only['p95']:<6.3f}"
              f" {full['median']:>13.2f} / {full['p95']:<6.2f}")
    with open(args.out, "w") as f:
        json.dump(report, f, indent=1)


if __name__ == "__main__":
    main()
