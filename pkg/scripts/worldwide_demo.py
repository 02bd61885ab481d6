"""Region-filtered versus worldwide search on a store, with search latency.

Each query's visible cap is centred on its weak label (stand-in for the
nadir point); worldwide search ignores it. Latency covers the search only.

    python scripts/worldwide_demo.py                 # fresh synthetic store
    python scripts/worldwide_demo.py --store runs/desk/store.aem
"""

import argparse

from astroloc.geo import DEFAULT_R_VIS_KM
from astroloc.retrieval import build_index, query_regions, recall_at_n, worldwide_eval
from astroloc.store import load_store, synth_dataset

NS = (1, 10, 100)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--store", default=None)
    ap.add_argument("--r_vis_km", type=float, default=DEFAULT_R_VIS_KM)
    args = ap.parse_args()

    store = load_store(args.store) if args.store else synth_dataset(200, 4, 1, 64, 0.6, 1)
    index = build_index(store)
    queries = [store.records[i] for i in store.query_indices]
    world = worldwide_eval(index, queries, NS)
    region = recall_at_n(index, queries, NS, regions=query_regions(queries, args.r_vis_km))

    print(f"{len(queries)} queries, {index.num_base} bases, {index.num_entries} indexed entries, "
          f"{index.nbytes / 1e6:.2f} MB")
    print(f"visible radius {args.r_vis_km:.1f} km")
    for name, rep in (("region", region), ("worldwide", world)):
        print(f"{name:10s} " + "  ".join(f"R@{n} {rep.recall_at[n]:5.1f}%" for n in NS))
    lat = world.latency_summary()
    print(f"worldwide search latency: mean {lat['mean_micros']:.0f} us, p95 {lat['p95_micros']:.0f} us ({lat['measures']})")


if __name__ == "__main__":
    main()
