"""Sign-flip detection table over Byzantine fractions.

    python scripts/table1.py --seeds 200 --out out/table1.csv
"""
import argparse
from pathlib import Path

from spectral_sentinel.cli import write_csv
from spectral_sentinel.sim import detection_table


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=200)
    ap.add_argument("--alpha", type=float, default=10.0)
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()
    rows = detection_table(seeds=args.seeds, alpha=args.alpha)
    print(f"{'f':>5} {'s2f2':>7} {'detect':>7} {'fpr':>6}")
    for r in rows:
        print(f"{r['f']:5.2f} {r['sigma2f2']:7.4f} {r['detection_rate']:7.3f} {r['fpr']:6.3f}")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        write_csv(args.out, "table1/v1", ["f", "sigma2f2", "detection_rate", "fpr", "seeds"], rows)


if __name__ == "__main__":
    main()
