"""Training-loop checks on the quadratic task.

Prints final squared gradient norms for the Sentinel, FedAvg and the clean
baseline under a 40% sign-flip, then the min-gradient envelope at T=100
and T=400 with an lr / sqrt(T) schedule.
"""
import argparse
from dataclasses import replace

import numpy as np

from spectral_sentinel.aggregators import AggKind, AggregatorSpec
from spectral_sentinel.attacks import AttackKind, AttackSpec
from spectral_sentinel.sim import clean_baseline, run_experiment, standard_config


def seeded(cfg, s):
    return replace(cfg, seed=s, attack=replace(cfg.attack, seed=s))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--rounds", type=int, default=200)
    args = ap.parse_args()

    base = standard_config(f_count=20, rounds=args.rounds,
                           attack=AttackSpec(AttackKind.SIGN_FLIP, alpha=10))
    runs = {
        "sentinel": lambda c: c,
        "fedavg": lambda c: replace(c, aggregator=AggregatorSpec(AggKind.MEAN)),
        "clean": clean_baseline,
    }
    for name, make in runs.items():
        v = [run_experiment(make(seeded(base, s))).summary()["final_grad_norm2"]
             for s in range(args.seeds)]
        print(f"{name:>9}: final |grad|^2 = {np.mean(v):.4g}")

    env = {}
    for T in (100, 400):
        cfg = standard_config(rounds=T, lr=1.0, lr_schedule="inv_sqrt_T",
                              attack=AttackSpec(AttackKind.SIGN_FLIP))
        env[T] = np.mean([run_experiment(seeded(cfg, s)).summary()["min_grad_norm2"]
                          for s in range(args.seeds)])
    print(f"min |grad|^2: T=100 {env[100]:.4f}, T=400 {env[400]:.4f}, "
          f"ratio {env[400] / env[100]:.3f} (1/sqrt(T) predicts 0.5)")


if __name__ == "__main__":
    main()
