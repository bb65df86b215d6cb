"""Feature-block modality trend: all streams together versus each stream alone.

Trains the standalone feature block on an 80/20 hold-out split of the desk
recipe's 600-clip dataset for every modality subset and seed, then prints the
per-seed accuracies, the seed means and the margin of the all-stream model
over each single stream. About three minutes per seed on one CPU core.
"""

import argparse
import functools
import json

from drivernet.recipes import DESK, feature_trend


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(DESK.seeds), help="training seeds")
    ap.add_argument("--out", default="feature_trend.json", help="JSON summary path")
    args = ap.parse_args()
    result = feature_trend(DESK, args.seeds, log=functools.partial(print, flush=True))
    mean = result["mean"]
    for name, acc in mean.items():
        print(f"{name:<5} mean accuracy {acc:.4f}")
    for single in ("body", "head", "hand"):
        print(f"all - {single}: {100 * (mean['all'] - mean[single]):+.2f} pp")
    with open(args.out, "w") as f:
        json.dump({"recipe": DESK.to_dict(), **result}, f, indent=1)


if __name__ == "__main__":
    main()
