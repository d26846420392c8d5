"""Full verification matrix on the default toy model, plus the residual records."""
import argparse

from seqkv.analyzer import report, verification_matrix, verify_residual_bounds
from seqkv.toy_lm import ModelConfig, build_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--vocab", type=int, default=8)
    ap.add_argument("--max-len", type=int, default=5)
    ap.add_argument("--residual-len", type=int, default=4)
    ap.add_argument("--contexts", action="store_true", help="also print one line per residual context")
    args = ap.parse_args()

    model = build_model(ModelConfig(vocab_size=args.vocab))
    text, _ = report(verification_matrix(model, args.max_len, args.residual_len))
    print(text, end="")
    if args.contexts:
        print(verify_residual_bounds(model, args.residual_len).records(), end="")


if __name__ == "__main__":
    main()
