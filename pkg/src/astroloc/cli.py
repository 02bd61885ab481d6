"""Command-line front end: ``astroloc <command> [--flags]``.

Every run echoes its effective configuration as JSON next to its outputs;
``--config <echo>`` replays it. Flags passed explicitly override the echo.

Exit codes:
  0  success
  1  other library error
  2  usage / invalid argument
  3  format error (malformed file or record)
  4  precondition error (e.g. K larger than the database)
  5  numeric failure (NaN/Inf)
  6  geometry error (invalid footprint or tile)
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .errors import AstroLocError, FormatError
from .geo import DEFAULT_R_VIS_KM
from .ingest import ingest, summarize
from .losses import LossConfig
from .mining import MinedPair, assign_queries, cluster_database, mine_pairs, save_cluster_model
from .plots import loss_chart, recall_chart
from .retrieval import build_index, query_regions, recall_at_n, worldwide_eval
from .store import load_store, save_store, synth_dataset
from .trainer import train

log = logging.getLogger("astroloc")

EXIT_USAGE = 2
SEED_ENV = "ASTROLOC_SEED"
LOSS_FIELDS = [f.name for f in fields(LossConfig)]
NOT_ECHOED = {"command", "config", "log_level", "func"}


def _env_seed(fallback: int) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return fallback
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"{SEED_ENV} must be an integer, got {raw!r}")


def _int_list(text) -> list[int]:
    if isinstance(text, list):
        return [int(v) for v in text]
    try:
        out = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("N values must be positive integers")
    return out


# --- outputs ---------------------------------------------------------------------------


def _echo(args: argparse.Namespace, path: Path) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in NOT_ECHOED}
    cfg["command"] = args.command
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, sort_keys=True, indent=1) + "\n")


def _out_dir(args) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    _echo(args, d / "config.json")
    return d


def _out_file(args) -> Path:
    p = Path(args.out)
    p.parent.mkdir(parents=True, exist_ok=True)
    _echo(args, p.with_name(p.name + ".config.json"))
    return p


def _print_json(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=1))


def _loss_cfg(args) -> LossConfig:
    return LossConfig(**{k: getattr(args, k) for k in LOSS_FIELDS})


def write_pairs_csv(pairs, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "db_id", "iou"])
        for p in pairs:
            w.writerow([p.query_id, p.db_id, repr(p.iou)])


def read_pairs_csv(path) -> list[MinedPair]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["query_id", "db_id", "iou"]:
            raise FormatError(f"{path}: expected header query_id,db_id,iou")
        try:
            return [MinedPair(r["query_id"], r["db_id"], float(r["iou"])) for r in reader]
        except (TypeError, ValueError) as e:
            raise FormatError(f"{path}:{reader.line_num}: {e}") from e


def read_loss_csv(path) -> list[tuple[int, float, float, float]]:
    with open(path, newline="") as fh:
        return [(int(r["iteration"]), float(r["pair"]), float(r["mum"]), float(r["total"]))
                for r in csv.DictReader(fh)]


def read_recall_csv(path) -> dict[int, float]:
    with open(path, newline="") as fh:
        return {int(r["N"]): float(r["recall_pct"]) for r in csv.DictReader(fh)}


# --- commands --------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    store = ingest(args.footprints, args.vectors)
    out = _out_file(args)
    save_store(store, out)
    summary = summarize(store)
    summary["out"] = str(out)
    _print_json(summary)
    return 0


def cmd_synth(args) -> int:
    store = synth_dataset(args.n_locations, args.db_per_location, args.queries_per_location,
                          args.dim, args.noise_sigma, args.seed)
    out = _out_file(args)
    save_store(store, out)
    _print_json(summarize(store))
    return 0


def cmd_pairs(args) -> int:
    store = load_store(args.store)
    pairs = mine_pairs(store, args.t_iou)
    out = _out_file(args)
    write_pairs_csv(pairs, out)
    print(f"{len(pairs)} pairs with IoU > {args.t_iou} written to {out}")
    return 0


def cmd_cluster(args) -> int:
    store = load_store(args.store)
    model = cluster_database(store, args.K, args.seed)
    if len(store.query_indices):
        model = assign_queries(model, store.vectors[store.query_indices])
    out = _out_file(args)
    save_cluster_model(model, out)
    info = {"K": model.K, "db_base": len(model.member_ids), "lloyd_iterations": len(model.inertia_history),
            "inertia": model.inertia_history[-1] if model.inertia_history else None}
    if model.bins is not None:
        info["bins"] = [int(b) for b in model.bins]
    _print_json(info)
    return 0


def cmd_train(args) -> int:
    store = load_store(args.store)
    cfg = _loss_cfg(args)
    pairs = read_pairs_csv(args.pairs) if args.pairs else None
    out = _out_dir(args)
    state, trained = train(store, cfg, lr=args.lr, iterations=args.iterations, seed=args.seed,
                           mining=args.mining, pair_index=pairs)
    save_store(trained, out / "store.aem")
    (out / "state.json").write_text(state.sidecar_json() + "\n")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "pair", "mum", "total"])
        for it, lp, lm, lt in state.loss_history:
            w.writerow([it, repr(lp), repr(lm), repr(lt)])
    (out / "loss.svg").write_text(loss_chart(state.loss_history))
    last = state.loss_history[-1] if state.loss_history else None
    print(f"trained {state.iteration} iterations; final total loss {last[3]:.6f}" if last else "no iterations run")
    return 0


def _queries(args, store):
    source = load_store(args.queries) if getattr(args, "queries", None) else store
    return [source.records[i] for i in source.query_indices]


def cmd_eval(args) -> int:
    store = load_store(args.store)
    index = build_index(store, augment=not args.no_augment)
    queries = _queries(args, store)
    regions = query_regions(queries, args.r_vis_km) if args.region else None
    report = recall_at_n(index, queries, args.Ns, regions=regions, iou_threshold=args.iou_threshold)
    out = _out_dir(args)
    (out / "recall.json").write_text(report.to_json() + "\n")
    (out / "recall.csv").write_text(report.to_csv())
    (out / "recall.svg").write_text(recall_chart(report.recall_at, f"Recall@N ({report.scope})"))
    _print_json(report.to_dict(with_predictions=False))
    return 0


def cmd_world(args) -> int:
    store = load_store(args.store)
    index = build_index(store, augment=not args.no_augment)
    report = worldwide_eval(index, _queries(args, store), args.Ns, iou_threshold=args.iou_threshold)
    out = _out_dir(args)
    (out / "recall.json").write_text(report.to_json() + "\n")
    (out / "recall.csv").write_text(report.to_csv())
    (out / "recall.svg").write_text(recall_chart(report.recall_at, "Recall@N (worldwide)"))
    # wall-clock numbers vary run to run, so they live apart from the reproducible files
    (out / "latency.csv").write_text(report.latency_csv())
    (out / "latency.json").write_text(json.dumps(report.latency_summary(), sort_keys=True, indent=1) + "\n")
    summary = report.to_dict(with_predictions=False)
    summary["latency"] = report.latency_summary()
    _print_json(summary)
    return 0


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    if not run.is_dir():
        raise FormatError(f"{run} is not a directory")
    found = False
    if (run / "loss.csv").exists():
        history = read_loss_csv(run / "loss.csv")
        (run / "loss.svg").write_text(loss_chart(history))
        if history:
            it, lp, lm, lt = history[-1]
            print(f"loss: {len(history)} iterations, last pair={lp:.6f} mum={lm:.6f} total={lt:.6f}")
        found = True
    if (run / "recall.csv").exists():
        recall = read_recall_csv(run / "recall.csv")
        (run / "recall.svg").write_text(recall_chart(recall))
        print("recall: " + "  ".join(f"R@{n}={r:.2f}%" for n, r in sorted(recall.items())))
        found = True
    if not found:
        raise FormatError(f"{run} holds neither loss.csv nor recall.csv")
    return 0


# --- parser ----------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, seed_fallback: int = 0) -> None:
    p.add_argument("--seed", type=int, default=_env_seed(seed_fallback),
                   help=f"RNG seed (default: ${SEED_ENV} or {seed_fallback})")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP worker threads")
    p.add_argument("--config", default=None, help="replay an echoed config JSON")
    p.add_argument("--log_level", default="WARNING")


def _loss_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(LossConfig):
        p.add_argument(f"--{f.name}", type=type(f.default), default=f.default)


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--store")
    p.add_argument("--queries", default=None, help="take queries from this store instead")
    p.add_argument("--out_dir")
    p.add_argument("--Ns", type=_int_list, default=[1, 10, 100])
    p.add_argument("--iou_threshold", type=float, default=0.0,
                   help="a retrieved base counts as correct above this IoU (0: any overlap)")
    p.add_argument("--no_augment", action="store_true", help="index rotation-0 entries only")


REQUIRED = {
    "ingest": ("footprints", "vectors", "out"),
    "synth": ("out",),
    "pairs": ("store", "out"),
    "cluster": ("store", "out"),
    "train": ("store", "out_dir"),
    "eval": ("store", "out_dir"),
    "world": ("store", "out_dir"),
    "report": ("run_dir",),
}


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="astroloc", description=__doc__.split("\n")[0],
                                     epilog=__doc__.split("\n\n", 2)[2],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"astroloc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["ingest"] = sub.add_parser("ingest", help="validate JSONL footprints + .npy vectors into a store")
    p.add_argument("--footprints")
    p.add_argument("--vectors")
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=cmd_ingest)

    p = subs["synth"] = sub.add_parser("synth", help="write a synthetic store")
    p.add_argument("--n_locations", type=int, default=200)
    p.add_argument("--db_per_location", type=int, default=4)
    p.add_argument("--queries_per_location", type=int, default=1)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--noise_sigma", type=float, default=0.6)
    p.add_argument("--out")
    _common(p, seed_fallback=1)
    p.set_defaults(func=cmd_synth)

    p = subs["pairs"] = sub.add_parser("pairs", help="mine query/db pairs above an IoU threshold")
    p.add_argument("--store")
    p.add_argument("--t_iou", type=float, default=LossConfig.t_iou)
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=cmd_pairs)

    p = subs["cluster"] = sub.add_parser("cluster", help="k-means over db base images, bin queries")
    p.add_argument("--store")
    p.add_argument("--K", type=int, default=LossConfig.K)
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=cmd_cluster)

    p = subs["train"] = sub.add_parser("train", help="optimize embeddings with pair + MUM losses")
    p.add_argument("--store")
    p.add_argument("--out_dir")
    p.add_argument("--pairs", default=None, help="pairs CSV from `astroloc pairs` (mined on the fly otherwise)")
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--mining", choices=("weighted", "uniform"), default="weighted")
    _loss_flags(p)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = subs["eval"] = sub.add_parser("eval", help="recall@N, optionally inside each query's visible region")
    _eval_flags(p)
    p.add_argument("--region", action="store_true", help="restrict each search to the visible cap")
    p.add_argument("--r_vis_km", type=float, default=DEFAULT_R_VIS_KM)
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = subs["world"] = sub.add_parser("world", help="unfiltered worldwide recall@N with per-query latency")
    _eval_flags(p)
    _common(p)
    p.set_defaults(func=cmd_world)

    p = subs["report"] = sub.add_parser("report", help="re-plot and summarize a run directory")
    p.add_argument("--run_dir")
    _common(p)
    p.set_defaults(func=cmd_report)
    return parser, subs


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            echoed = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            parser.error(f"cannot read config {args.config}: {e}")
        if echoed.get("command", args.command) != args.command:
            parser.error(f"config was echoed by `{echoed['command']}`, not `{args.command}`")
        echoed.pop("command", None)
        unknown = set(echoed) - set(vars(args))
        if unknown:
            parser.error(f"unknown config keys: {', '.join(sorted(unknown))}")
        subs[args.command].set_defaults(**echoed)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k) is None]
    if missing:
        subs[args.command].error("missing " + ", ".join(f"--{k}" for k in missing))
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    limits = threadpool_limits(args.threads) if args.threads else nullcontext()
    try:
        with limits:
            return args.func(args)
    except AstroLocError as e:
        print(f"error ({type(e).__name__}): {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
