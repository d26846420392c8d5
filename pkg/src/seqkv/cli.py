"""Command-line front end: gen, compress, decompress, verify, ratio, stats.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O or format error.
"""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import analyzer
from .codec import container
from .codec.quant import CodecError, QuantizerConfig, theoretical_ratio
from .dedup_store import FingerprintMismatch, analyze_sessions, layer_savings, predictions
from .plt_index import DISTANCE, SHARED_INFORMATION, cluster, cluster_table
from .predictor import LN2
from .toy_lm import (
    ConfigError,
    ModelConfig,
    build_model,
    embedding_diameter,
    entropy_bits,
    forward_batch,
    lipschitz_estimate,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

MODEL_KEYS = {
    "vocab_size": ("vocab_size", int),
    "layers": ("num_layers", int),
    "heads": ("num_heads", int),
    "head_dim": ("head_dim", int),
    "seed": ("seed", int),
    "max_context": ("max_context", int),
}
CODEC_KEYS = {
    "mode": str,
    "base_depth": int,
    "distortion": float,
    "mean_surprisal": float,
    "predictor": str,
    "top_k": int,
    "tail_mode": str,
    "centroid_payload": str,
}
WORKLOAD_KEYS = {
    "sessions": int,
    "cluster_fraction": float,
    "tail_ratio": float,
    "length": int,
    "temperature": float,
}
OTHER_KEYS = {"delta": str, "criterion": str, "max_len": int, "residual_len": int}


class UsageError(Exception):
    pass


class Resolved:
    """Model, codec, workload and clustering settings after file and flag overrides."""

    def __init__(self, values: dict, seed: int):
        try:
            mc = ModelConfig(**{MODEL_KEYS[k][0]: MODEL_KEYS[k][1](v) for k, v in values.items() if k in MODEL_KEYS})
            mc.validate()
            self.model_config = mc
            self.codec = QuantizerConfig(
                **{k: CODEC_KEYS[k](v) for k, v in values.items() if k in CODEC_KEYS}
            )
            self.codec.validate(calibrated=False)
            wl = {k: WORKLOAD_KEYS[k](v) for k, v in values.items() if k in WORKLOAD_KEYS}
            wl.setdefault("length", mc.max_context)
            self.workload = analyzer.WorkloadSpec(**wl, seed=seed)
            self.workload.validate()
            self.delta = values.get("delta", "auto")
            if self.delta != "auto":
                float(self.delta)
            self.criterion = values.get("criterion", SHARED_INFORMATION)
            if self.criterion not in (SHARED_INFORMATION, DISTANCE):
                raise UsageError(f"unknown criterion {self.criterion!r}")
            self.max_len = int(values.get("max_len", 5))
            self.residual_len = int(values.get("residual_len", 4))
        except (ValueError, TypeError, ConfigError, CodecError) as exc:
            raise UsageError(str(exc)) from exc
        self.seed = seed

    def lines(self) -> list[str]:
        mc = self.model_config
        out = [
            f"vocab_size={mc.vocab_size}",
            f"layers={mc.num_layers}",
            f"heads={mc.num_heads}",
            f"head_dim={mc.head_dim}",
            f"seed={mc.seed}",
            f"max_context={mc.max_context}",
        ]
        out += [f"{k}={v}" for k, v in self.codec.as_dict().items()]
        w = self.workload
        out += [
            f"sessions={w.sessions}",
            f"cluster_fraction={w.cluster_fraction!r}",
            f"tail_ratio={w.tail_ratio!r}",
            f"length={w.length}",
            f"temperature={w.temperature!r}",
            f"workload_seed={w.seed}",
            f"delta={self.delta}",
            f"criterion={self.criterion}",
            f"max_len={self.max_len}",
            f"residual_len={self.residual_len}",
        ]
        return out


def parse_pairs(text: str, source: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in MODEL_KEYS and key not in CODEC_KEYS and key not in WORKLOAD_KEYS and key not in OTHER_KEYS:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = val
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument("--seed", type=int, default=0, help="workload sampling seed")
    common.add_argument("--out", metavar="PATH", help="output file")
    common.add_argument("--format", choices=("text", "records"), default="text")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    p = argparse.ArgumentParser(prog="seqkv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="sample a workload")
    c = sub.add_parser("compress", parents=[common], help="cluster and compress a workload")
    c.add_argument("workload")
    d = sub.add_parser("decompress", parents=[common], help="reconstruct every session of a container")
    d.add_argument("container")
    sub.add_parser("verify", parents=[common], help="run the claim matrix")
    r = sub.add_parser("ratio", parents=[common], help="theoretical compression ratio table")
    r.add_argument("--layers", "-L", type=int, default=80)
    r.add_argument("--heads", "-H", type=int, default=64)
    r.add_argument("--head-dim", "-d", type=int, default=128)
    r.add_argument("--bits", "-b", type=float, default=3)
    r.add_argument("--h-bar", type=float, default=4.3)
    r.add_argument("--overhead", type=float, default=1.0)
    s = sub.add_parser("stats", parents=[common], help="residual traces and cluster table of a workload")
    s.add_argument("workload")
    return p


class Output:
    def __init__(self, fmt: str):
        self.fmt = fmt
        self.lines: list[str] = []

    def row(self, key: str, value) -> None:
        if self.fmt == "records":
            self.lines.append(f"{key}={value}")
        else:
            self.lines.append(f"{key:<28} {value}")

    def raw(self, text: str) -> None:
        self.lines.extend(text.rstrip("\n").split("\n"))

    def flush(self) -> None:
        sys.stdout.write("\n".join(self.lines) + "\n")
        self.lines = []


def read_workload(path: str, fingerprint: int) -> tuple[dict, float | None]:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise container.ContainerError(f"{path}: missing workload header")
    try:
        header = dict(kv.split("=", 1) for kv in lines[0][1:].split())
        written_by = int(header.get("fingerprint", "-1"), 0)
        delta = float(header["delta"]) if "delta" in header else None
    except ValueError as exc:
        raise container.ContainerError(f"{path}: bad workload header: {exc}") from exc
    if written_by != fingerprint:
        raise FingerprintMismatch(
            f"{path}: workload was generated by model {header.get('fingerprint')}, config gives {fingerprint:#018x}"
        )
    sessions = {}
    for i, line in enumerate(lines[1:]):
        try:
            sessions[i] = tuple(int(t) for t in line.split())
        except ValueError as exc:
            raise container.ContainerError(f"{path}:{i + 2}: {exc}") from exc
    return sessions, delta


def _model(res: Resolved):
    return build_model(res.model_config)


def cmd_gen(res: Resolved, args, out: Output) -> int:
    model = _model(res)
    w = analyzer.generate_workload(model, res.workload)
    text = w.text(model.fingerprint())
    out.row("fingerprint", f"{model.fingerprint():#018x}")
    out.row("sessions", len(w.sessions))
    out.row("achieved_cluster_fraction", f"{w.achieved_fraction:.6f}")
    out.row("achieved_tail_ratio", f"{w.achieved_tail_ratio:.6f}")
    out.row("delta", f"{w.delta!r}")
    if args.out:
        Path(args.out).write_text(text)
        out.row("wrote", args.out)
    else:
        out.raw(text)
    return EXIT_OK


def _delta(res: Resolved, header_delta: float | None) -> float:
    if res.delta != "auto":
        return float(res.delta)
    if header_delta is None:
        raise UsageError("delta=auto needs a workload header with delta")
    return header_delta


def cmd_compress(res: Resolved, args, out: Output) -> int:
    model = _model(res)
    sessions, header_delta = read_workload(args.workload, model.fingerprint())
    delta = _delta(res, header_delta)
    records = cluster(model, sessions, delta, res.criterion)
    cache = container.compress(model, sessions, records, res.codec)
    dest = args.out or str(Path(args.workload).with_suffix(".skvc"))
    cache.write(dest)
    store = cache.store
    tokens = sum(len(s) for s in sessions.values())
    w = res.workload
    rep = store.storage_report(
        (w.cluster_fraction, w.tail_ratio), framing_bits=container.framing_bits(model, cache.config)
    )
    out.row("container", dest)
    out.row("total_bits", cache.total_bits)
    out.row("tokens", tokens)
    out.row("bits_per_token", f"{cache.total_bits / max(tokens, 1):.6f}")
    out.row("clusters", len(records))
    out.row("delta", f"{delta!r}")
    if cache.config.mode == "surprisal_adaptive":
        out.row("calibrated_mean_surprisal", f"{cache.config.mean_surprisal!r}")
    for name, bits in cache.sections.items():
        out.row(f"section_{name}_bits", bits)
    out.raw(rep.records() if out.fmt == "records" else rep.text())
    for k, v in layer_savings(store).items():
        out.row(f"savings_{k}", v)
    return EXIT_OK


def cmd_decompress(res: Resolved, args, out: Output) -> int:
    model = _model(res)
    data = container.read(args.container)
    store = container.read_store(data, model)
    kv = store.reconstruct_all()
    worst_err, worst_slack, ok = 0.0, math.inf, True
    for sid, rec in kv.items():
        toks = np.array([store.tokens(sid)], dtype=np.int64)
        exact = forward_batch(model, toks).kv[0]
        err = np.abs(rec - exact).reshape(len(rec), -1).max(axis=1)
        bound = store.error_bounds(sid)
        slack = bound + 1e-12 - err
        worst_err = max(worst_err, float(err.max(initial=0.0)))
        worst_slack = min(worst_slack, float(slack.min(initial=math.inf)))
        ok &= bool(np.all(slack >= 0))
    if args.out:
        np.savez(args.out, **{f"session_{sid}": v for sid, v in sorted(kv.items())})
        out.row("wrote", args.out)
    out.row("sessions", len(kv))
    out.row("max_abs_error", f"{worst_err:.6e}")
    out.row("min_bound_slack", f"{worst_slack:.6e}")
    out.row("within_bound", "yes" if ok else "NO")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_verify(res: Resolved, args, out: Output) -> int:
    model = _model(res)
    rows = analyzer.verification_matrix(model, res.max_len, res.residual_len)
    text, records = analyzer.report(rows)
    out.raw(records if out.fmt == "records" else text)
    if args.out:
        Path(args.out).write_text(records)
    return EXIT_OK if all(r.passed for r in rows) else EXIT_FAIL


def cmd_ratio(res: Resolved, args, out: Output) -> int:
    try:
        t = theoretical_ratio(args.layers, args.heads, args.head_dim, args.bits, args.h_bar, args.overhead)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out.row("layers", args.layers)
    out.row("heads", args.heads)
    out.row("head_dim", args.head_dim)
    out.row("bits", f"{args.bits:g}")
    out.row("h_bar", f"{args.h_bar:g}")
    out.row("overhead", f"{args.overhead:g}")
    out.row("bits_per_token_fp16", f"{t['bits_fp16']:.6g}")
    out.row("bits_per_token_b", f"{t['bits_b']:.6g}")
    out.row("floor_bits_per_token", f"{t['floor_bits']:.6g}")
    out.row("ratio_fp16", f"{t['ratio_fp16']:.6g}")
    out.row("ratio_b", f"{t['ratio_b']:.6g}")
    out.row("ratio_b_3sf", f"{t['ratio_b']:.3g}")
    return EXIT_OK


def cmd_stats(res: Resolved, args, out: Output) -> int:
    model = _model(res)
    sessions, header_delta = read_workload(args.workload, model.fingerprint())
    delta = _delta(res, header_delta)
    records = cluster(model, sessions, delta, res.criterion)
    out.raw(cluster_table(records))
    lip = lipschitz_estimate(model, min(3, model.config.max_context - 1))
    c_e = embedding_diameter(model)
    analyses = analyze_sessions(model, sessions)
    for sid in sorted(analyses):
        a = analyses[sid]
        resid = np.linalg.norm((a.kv - predictions(model, a, res.codec)).reshape(a.n, -1), axis=1)
        h = a.surprisal
        H = entropy_bits(a.probs)
        bound = 0.25 * lip.f_lipschitz**2 * c_e**2 * np.minimum(1.0, 4 * H * LN2)
        for i in range(a.n):
            out.lines.append(
                f"session={sid} position={i + 1} surprisal={h[i]:.9f} entropy={H[i]:.9f} "
                f"residual_norm={resid[i]:.9f} variance={a.variance[i]:.9f} bound={bound[i]:.9f}"
            )
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "compress": cmd_compress,
    "decompress": cmd_decompress,
    "verify": cmd_verify,
    "ratio": cmd_ratio,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    out = Output(args.format)
    try:
        values = {}
        if args.config:
            values.update(parse_pairs(Path(args.config).read_text(), args.config))
        for item in args.set:
            values.update(parse_pairs(item, "--set"))
        res = Resolved(values, args.seed)
        for line in res.lines():
            out.lines.append(f"config {line}")
        code = COMMANDS[args.command](res, args, out)
    except UsageError as exc:
        out.flush()
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CodecError, FingerprintMismatch, UnicodeDecodeError) as exc:
        out.flush()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    out.flush()
    return code


if __name__ == "__main__":
    sys.exit(main())
