"""DP rescue beyond the transition and async degradation."""
import argparse
from dataclasses import replace

from spectral_sentinel.sim import dp_comparison, standard_config, suite_detection


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--eps", type=float, nargs="+", default=[1.0, 4.0, 8.0])
    ap.add_argument("--s2f2", type=float, default=0.30)
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--tau-max", type=int, nargs="+", default=[0, 2, 5, 10])
    args = ap.parse_args()

    for eps in args.eps:
        r = dp_comparison(sigma2_f2=args.s2f2, eps=eps, seeds=args.seeds)
        print(f"eps={eps:g}: detection {r['dp']:.3f} (no DP {r['no_dp']:.3f}), "
              f"fpr {r['dp_fpr']:.3f}")

    base = standard_config()
    for t in args.tau_max:
        r = suite_detection(replace(base, tau_max=t))
        print(f"tau_max={t}: detection {r['detection_rate']:.3f}, fpr {r['fpr']:.3f}")


if __name__ == "__main__":
    main()
