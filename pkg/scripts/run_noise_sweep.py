#!/usr/bin/env python3
"""Test accuracy under Gaussian input noise for both architectures."""
import argparse

from repalign.protocol import ProtocolConfig, noise_monotone, run_experiment_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--sigmas", default="0.0,0.1,0.2,0.3")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--out", default="results/noise")
    args = ap.parse_args()

    cfg = ProtocolConfig(seeds=[int(s) for s in args.seeds.split(",")],
                         noise_sigmas=[float(s) for s in args.sigmas.split(",")],
                         train={"max_epochs": args.epochs})
    table = run_experiment_suite("noise_resilience", cfg, args.out).data["noise"]
    print("sigma  " + "  ".join(f"{a:>16}" for a in ("mlp", "pgnn")))
    for i, sigma in enumerate(table["sigmas"]):
        cells = [f"{table[a]['mean'][i]:.4f}+/-{table[a]['std'][i]:.4f}" for a in ("mlp", "pgnn")]
        print(f"{sigma:<6} " + "  ".join(f"{c:>16}" for c in cells))
    for arch in ("mlp", "pgnn"):
        print(f"{arch}: monotone within std = {noise_monotone(table[arch])}")


if __name__ == "__main__":
    main()
