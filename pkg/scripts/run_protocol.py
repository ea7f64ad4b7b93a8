#!/usr/bin/env python3
"""Train MLP and PGNN over several seeds and compare their representations.

    python3 scripts/run_protocol.py --seeds 0,1,2,3,4 --epochs 30 --out results/protocol
"""
import argparse

from repalign.protocol import ProtocolConfig, run_protocol


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--arch-a", default="mlp")
    ap.add_argument("--arch-b", default="pgnn")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="results/protocol")
    args = ap.parse_args()

    cfg = ProtocolConfig(arch_a=args.arch_a, arch_b=args.arch_b,
                         seeds=[int(s) for s in args.seeds.split(",")],
                         train={"max_epochs": args.epochs}, jobs=args.jobs)
    report = run_protocol(cfg)
    report.write(args.out)
    for row in report.summary:
        print(f"{row['metric']:<28}{row['layer']:<8}{row['mean']:.4f} +/- {row['std']:.4f}")
    for key, val in sorted(report.paired.items()):
        if val["n"]:
            print(f"{key:<40}{val['mean']:+.4f} +/- {val['std']:.4f}")


if __name__ == "__main__":
    main()
