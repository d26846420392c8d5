"""Waterfill vs uniform bit totals over a sweep of distortion quantiles."""
import argparse

import numpy as np

from seqkv.analyzer import WorkloadSpec, generate_workload
from seqkv.codec import WATERFILL, QuantizerConfig, compress
from seqkv.dedup_store import analyze_sessions
from seqkv.plt_index import cluster
from seqkv.toy_lm import ModelConfig, build_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sessions", type=int, default=100)
    ap.add_argument("--length", type=int, default=24)
    ap.add_argument("--fraction", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=2)
    args = ap.parse_args()

    model = build_model(ModelConfig()).with_max_context(args.length)
    w = generate_workload(model, WorkloadSpec(args.sessions, args.fraction, 0.25, args.length, seed=args.seed))
    analyses = analyze_sessions(model, w.sessions)
    n_comp = next(iter(analyses.values())).kv[0].size
    sigma2 = np.concatenate([a.variance / n_comp for a in analyses.values()])
    recs = cluster(model, w.sessions, w.delta)
    for b in (2, 3, 4, 8):
        print(f"uniform b={b}\t{compress(model, w.sessions, recs, QuantizerConfig(base_depth=b)).total_bits}")
    print("quantile\tD\tdepth0_share\twaterfill_bits")
    for q in (0.05, 0.1, 0.25, 0.5, 0.75):
        D = float(np.quantile(sigma2, q))
        box = compress(model, w.sessions, recs, QuantizerConfig(mode=WATERFILL, distortion=D))
        print(f"{q}\t{D:.5g}\t{np.mean(sigma2 <= D):.3f}\t{box.total_bits}")


if __name__ == "__main__":
    main()
