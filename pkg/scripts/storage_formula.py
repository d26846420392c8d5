"""Measured vs predicted relative storage cost on generated workloads."""
import argparse

from seqkv.analyzer import WorkloadSpec, generate_workload
from seqkv.codec import QuantizerConfig, compress
from seqkv.codec.container import framing_bits
from seqkv.dedup_store import layer_savings
from seqkv.plt_index import cluster
from seqkv.toy_lm import ModelConfig, build_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sessions", type=int, default=400)
    ap.add_argument("--length", type=int, default=80)
    ap.add_argument("--bits", type=int, default=8)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    model = build_model(ModelConfig()).with_max_context(args.length)
    config = QuantizerConfig(base_depth=args.bits)
    print("f\ttail\tmeasured\tformula\trel_err\tlayer1_saved\tlayer2_saved\ttotal_saved")
    for f, r in [(0.0, 0.5), (0.5, 0.2), (0.9, 0.1), (1.0, 0.5), (0.5, 0.5)]:
        w = generate_workload(model, WorkloadSpec(args.sessions, f, r, args.length, seed=args.seed))
        box = compress(model, w.sessions, cluster(model, w.sessions, w.delta), config)
        rep = box.store.storage_report((f, r), framing_bits=framing_bits(model, box.config))
        s = layer_savings(box.store)
        print(f"{f}\t{r}\t{rep.measured:.4f}\t{rep.predicted_target:.4f}\t"
              f"{rep.measured / rep.predicted_target - 1:+.3%}\t"
              f"{s['layer1_saved']}\t{s['layer2_saved']}\t{s['total_saved']}")


if __name__ == "__main__":
    main()
