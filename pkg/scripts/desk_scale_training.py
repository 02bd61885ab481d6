"""Train on the default synthetic task and report recall before and after.

    python scripts/desk_scale_training.py --lr 0.05 --iterations 2000
    python scripts/desk_scale_training.py --lr 0.5 --checkpoint_every 250

Prints R@1/10/100 at every checkpoint and writes loss.csv, recall.csv and
plots to --out_dir.
"""

import argparse
import csv
import time
from pathlib import Path

from astroloc.losses import LossConfig
from astroloc.plots import line_chart, loss_chart
from astroloc.store import save_store, synth_dataset
from astroloc.trainer import eval_checkpoint, train

NS = (1, 10, 100)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--checkpoint_every", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0, help="training seed")
    ap.add_argument("--data_seed", type=int, default=1)
    ap.add_argument("--noise_sigma", type=float, default=0.6)
    ap.add_argument("--out_dir", default="runs/desk")
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = synth_dataset(200, 4, 1, 64, args.noise_sigma, args.data_seed)
    cfg = LossConfig()
    curve = []

    def checkpoint(state):
        done = state.iteration + 1
        if done % args.checkpoint_every == 0 or done == args.iterations:
            rep = eval_checkpoint(state, Ns=NS)
            curve.append((done, rep.recall_at))
            print(f"iter {done:5d}  " + "  ".join(f"R@{n} {rep.recall_at[n]:5.1f}%" for n in NS), flush=True)

    init, _ = train(store, cfg, lr=0.0, iterations=1, seed=args.seed)
    rep0 = eval_checkpoint(init, Ns=NS)
    curve.append((0, rep0.recall_at))
    print(f"iter     0  " + "  ".join(f"R@{n} {rep0.recall_at[n]:5.1f}%" for n in NS))

    t0 = time.perf_counter()
    state, trained = train(store, cfg, lr=args.lr, iterations=args.iterations, seed=args.seed, callback=checkpoint)
    print(f"{args.iterations} iterations in {time.perf_counter() - t0:.1f} s")

    save_store(trained, out / "store.aem")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "pair", "mum", "total"])
        w.writerows(state.loss_history)
    with open(out / "recall.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", *(f"R@{n}" for n in NS)])
        for it, r in curve:
            w.writerow([it, *(r[n] for n in NS)])
    (out / "loss.svg").write_text(loss_chart(state.loss_history))
    series = {f"R@{n}": ([it for it, _ in curve], [r[n] for _, r in curve]) for n in NS}
    (out / "recall_vs_iteration.svg").write_text(
        line_chart(series, f"Recall during training (lr={args.lr})", "iteration", "recall (%)"))


if __name__ == "__main__":
    main()
