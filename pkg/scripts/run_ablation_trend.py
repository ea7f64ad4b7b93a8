#!/usr/bin/env python3
"""Accuracy curves of PGNN against its unstructured ablation, plus the trend check."""
import argparse

from repalign.protocol import ProtocolConfig, run_experiment_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--out", default="results/ablation")
    args = ap.parse_args()

    cfg = ProtocolConfig(seeds=[int(s) for s in args.seeds.split(",")],
                         train={"max_epochs": args.epochs})
    res = run_experiment_suite("ablation", cfg, args.out)
    for t in res.data.get("trend", []):
        verdict = "reproduced" if t["holds"] else "not reproduced"
        print(f"{t['check']:<6} epoch {t['epoch']:>3}  pgnn {t['pgnn']:.4f}  "
              f"nostruct {t['pgnn_nostruct']:.4f}  {verdict}")


if __name__ == "__main__":
    main()
