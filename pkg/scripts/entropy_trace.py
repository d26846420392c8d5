"""Per-position conditional entropy and its running average.

The synthetic Markov source has a hand-set decreasing entropy; the toy model
trace is exact enumeration and grows as vocab**n.
"""
import argparse

from seqkv.analyzer import constant_source, linear_decay_source, verify_asymptotic
from seqkv.toy_lm import ModelConfig, build_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--source", choices=["decay", "constant", "toy"], default="decay")
    ap.add_argument("-n", type=int, default=None, help="positions (64 synthetic, 6 toy)")
    args = ap.parse_args()

    if args.source == "toy":
        trace = verify_asymptotic(build_model(ModelConfig()), args.n or 6)
    else:
        n = args.n or 64
        src = linear_decay_source(n) if args.source == "decay" else constant_source(n)
        trace = verify_asymptotic(src, n)
    print(trace.records(), end="")
    print(f"non_increasing={trace.non_increasing}")


if __name__ == "__main__":
    main()
