"""Loss/mining ablation on the default synthetic task.

Variants, all at the same iteration budget:
  pair+MUM   pair loss + MUM loss with query-weighted cluster sampling
  pair       pair loss alone
  pair+MS    pair loss + MUM loss with uniform cluster sampling
  MS         MUM loss alone, uniform sampling
  MUM        MUM loss alone, weighted sampling

    python scripts/ablation.py --lr 0.05 --seeds 0 1 2
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from astroloc.losses import LossConfig
from astroloc.store import synth_dataset
from astroloc.trainer import eval_checkpoint, train

VARIANTS = {
    "pair+MUM": (LossConfig(), "weighted"),
    "pair": (LossConfig(lambda2=0.0), "weighted"),
    "pair+MS": (LossConfig(), "uniform"),
    "MS": (LossConfig(lambda1=0.0), "uniform"),
    "MUM": (LossConfig(lambda1=0.0), "weighted"),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--out", default="runs/ablation.csv")
    args = ap.parse_args()

    store = synth_dataset(200, 4, 1, 64, 0.6, 1)
    rows = []
    for name, (cfg, mining) in VARIANTS.items():
        r1 = []
        for seed in args.seeds:
            state, _ = train(store, cfg, lr=args.lr, iterations=args.iterations, seed=seed, mining=mining)
            rep = eval_checkpoint(state, Ns=(1, 10, 100))
            rows.append([name, seed, *(rep.recall_at[n] for n in (1, 10, 100))])
            r1.append(rep.recall_at[1])
        print(f"{name:9s} R@1 per seed {r1}  mean {np.mean(r1):.2f}", flush=True)

    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "R@1", "R@10", "R@100"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
