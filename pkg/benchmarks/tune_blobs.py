"""Validation-accuracy grid search over gamma, alpha (and mu) on the blob benchmark.

Usage: python benchmarks/tune_blobs.py [--set key=value ...] [--no-mu]

Only GLOBAL validation accuracy is used for selection; test accuracy is
printed for reference.
"""

import argparse
import itertools

from dbcd.config import GRID, parse_config
from dbcd.simulator import GLOBAL, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--no-mu", action="store_true")
    args = ap.parse_args()
    base = parse_config(None, ["hidden_dim=32", "patience=0"] + args.set)
    mus = [base.mu] if args.no_mu else GRID["mu"]
    best = None
    for g, a, mu in itertools.product(GRID["gamma"], GRID["alpha"], mus):
        log = run_experiment(base.replace(gamma=g, alpha=a, mu=mu))
        val, test = log.final(GLOBAL, "val"), log.final(GLOBAL, "test")
        print(f"gamma={g} alpha={a} mu={mu} val={val:.4f} test={test:.4f}", flush=True)
        if best is None or val > best[0]:
            best = (val, g, a, mu, test)
    print(f"BEST gamma={best[1]} alpha={best[2]} mu={best[3]} val={best[0]:.4f} test={best[4]:.4f}")


if __name__ == "__main__":
    main()
