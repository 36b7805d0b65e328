"""Operator CLI: synth / train / induce / analyze / verify.

Exit codes: 0 success, 2 usage or configuration error, 3 training failure,
4 data errors. Training is configured by a JSON file whose keys are validated
against a fixed schema (flags override file values); all randomness descends
from the single seed.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import asdict
from pathlib import Path

from . import corpus, encdec, metrics, store, verify
from .corpus import Example, SynthSpec
from .encdec import ModelConfig, NonFiniteLoss

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TRAINING = 3
EXIT_DATA = 4

CONFIG_DEFAULTS = {
    "d": 32,
    "L": 3,
    "mode": "lsr",
    "epsilon": 1e-6,
    "vocab_size": 200,
    "lr": 0.2,
    "clip": 2.0,
    "steps": 500,
    "seed": 0,
    "batch_size": 8,
    "share_scoring": False,
    "gsa_source": "last_layer",
    "max_decode_len": 32,
}


class ConfigError(ValueError):
    pass


def load_run_config(path: str | None, overrides: dict) -> dict:
    """Merge defaults <- config file <- flags; reject unknown keys."""
    merged = dict(CONFIG_DEFAULTS)
    if path is not None:
        try:
            file_cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
        unknown = set(file_cfg) - set(CONFIG_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def model_config_from(cfg: dict) -> ModelConfig:
    return ModelConfig(
        vocab_size=int(cfg["vocab_size"]),
        d=int(cfg["d"]),
        layers=int(cfg["L"]),
        mode=str(cfg["mode"]),
        epsilon=float(cfg["epsilon"]),
        seed=int(cfg["seed"]),
        share_scoring=bool(cfg["share_scoring"]),
        gsa_source=str(cfg["gsa_source"]),
        max_decode_len=int(cfg["max_decode_len"]),
    )


def _load_examples(path: str, vocab_size: int, seed: int) -> list[Example]:
    examples = []
    for record in corpus.read_jsonl(path):
        examples.append(corpus.example_from_record(record, vocab_size, seed))
    if not examples:
        raise ValueError(f"no documents in {path!r}")
    return examples


def _safe_name(doc_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", doc_id) or "doc"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SynthSpec(
        connectors=args.connectors,
        children_per_connector=args.children,
        filler_sentences=args.fillers,
        vocab_size=args.vocab_size,
        sentence_len=(args.len_min, args.len_max),
        seed=args.seed,
    )
    docs = corpus.generate_synthetic(spec, args.n_docs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus.write_jsonl([corpus.example_to_record(d) for d in docs], out)
    meta = {"seed": args.seed, "n_docs": args.n_docs, "spec": asdict(spec)}
    out.with_name(out.name + ".meta.json").write_text(json.dumps(meta, indent=1))
    print(f"wrote {len(docs)} documents to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        cfg = load_run_config(args.config, {
            "d": args.d, "L": args.layers, "mode": args.mode, "vocab_size": args.vocab_size,
            "lr": args.lr, "clip": args.clip, "steps": args.steps, "seed": args.seed,
            "batch_size": args.batch_size,
        })
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not Path(args.data).exists():
        print(f"error: data path {args.data!r} does not exist", file=sys.stderr)
        return EXIT_USAGE
    try:
        examples = _load_examples(args.data, int(cfg["vocab_size"]), int(cfg["seed"]))
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    model = encdec.build_model(model_config_from(cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    loss_path = out.with_name(out.name + ".loss.jsonl")
    try:
        with open(loss_path, "w", encoding="utf-8") as fh:
            def log_step(step, loss):
                fh.write(json.dumps({"step": step, "loss": loss}) + "\n")

            losses = encdec.train(
                model, examples,
                steps=int(cfg["steps"]), lr=float(cfg["lr"]), clip=float(cfg["clip"]),
                batch_size=int(cfg["batch_size"]), on_step=log_step,
            )
    except NonFiniteLoss as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    store.save_checkpoint(model, out, step=len(losses))
    print(f"final loss {losses[-1]:.4f} after {len(losses)} steps; checkpoint at {out}")
    return EXIT_OK


def cmd_induce(args) -> int:
    try:
        model, _ = store.load_checkpoint(args.checkpoint)
    except (store.CorruptCheckpoint, store.UnsupportedVersion) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        examples = _load_examples(args.data, model.config.vocab_size, model.config.seed)
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for ex in examples:
        graph = encdec.induce_graph(model, ex)
        stem = _safe_name(ex.doc_id)
        (out_dir / f"{stem}.json").write_text(graph.to_json())
        (out_dir / f"{stem}.dot").write_text(graph.to_dot(threshold=args.dot_threshold))
    if args.decode_out:
        encdec.decode_to_jsonl(model, examples, args.decode_out)
    print(f"induced {len(examples)} graphs into {out_dir}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    model = None
    if args.checkpoint:
        try:
            model, _ = store.load_checkpoint(args.checkpoint)
        except (store.CorruptCheckpoint, store.UnsupportedVersion) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
    malformed = 0
    rows = []
    coverage_sum = copy_sum = 0.0
    bucket_counts = {"compression": 0.0, "two": 0.0, "three": 0.0, "four": 0.0}
    classified_total = 0
    try:
        lines = Path(args.pairs).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            result = metrics.analyze_pair(record["article"], record["summary"])
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            print(f"warning: skipping line {lineno}: {exc}", file=sys.stderr)
            malformed += 1
            continue
        row = {"doc_id": record.get("doc_id", f"line{lineno}")}
        row.update(result)
        row["diversity"] = None
        if model is not None:
            try:
                ex = corpus.example_from_record(record, model.config.vocab_size, model.config.seed)
                ts = encdec.encode_tokens(model, ex.sentences)
                ns = encdec.run_stack(model, encdec.pool_sentences(model, ts))
                row["diversity"] = metrics.diversity_report(ns.graphs, ns.scores).as_dict()
            except ValueError as exc:
                print(f"warning: no diversity for line {lineno}: {exc}", file=sys.stderr)
        rows.append(row)
        coverage_sum += row["coverage"]
        copy_sum += row["copy_length"]
        f = row["fusion"]
        if f and f["classified"]:
            n = f["classified"]
            classified_total += n
            bucket_counts["compression"] += f["compression_pct"] * n / 100.0
            bucket_counts["two"] += f["two_hop_pct"] * n / 100.0
            bucket_counts["three"] += f["three_hop_pct"] * n / 100.0
            bucket_counts["four"] += f["four_plus_pct"] * n / 100.0
    if rows:
        pct = lambda k: 100.0 * bucket_counts[k] / classified_total if classified_total else 0.0
        rows.append({
            "doc_id": "__aggregate__",
            "coverage": coverage_sum / len(rows),
            "copy_length": copy_sum / len(rows),
            "fusion": {
                "compression_pct": pct("compression"),
                "two_hop_pct": pct("two"),
                "three_hop_pct": pct("three"),
                "four_plus_pct": pct("four"),
                "classified": classified_total,
            },
            "diversity": None,
        })
    corpus.write_jsonl(rows, args.out)
    print(f"analyzed {len(rows) - (1 if rows else 0)} pairs "
          f"({malformed} malformed) into {args.out}")
    return EXIT_DATA if malformed else EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_suite(args.suite)
    all_ok = True
    for r in results:
        mark = "PASS" if r.passed else "FAIL"
        print(f"[{mark}] {r.name} ({r.seconds:.2f}s): {r.detail}")
        all_ok &= r.passed
    return EXIT_OK if all_ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treesum", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic hierarchical corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-docs", type=int, default=64)
    p.add_argument("--connectors", type=int, default=2)
    p.add_argument("--children", type=int, default=1,
                   help="children per connector (default gives the 8-sentence shape)")
    p.add_argument("--fillers", type=int, default=4)
    p.add_argument("--vocab-size", type=int, default=60)
    p.add_argument("--len-min", type=int, default=4)
    p.add_argument("--len-max", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a summarizer on a JSONL corpus")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint base path")
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--layers", type=int, default=None, help="overrides config key L")
    p.add_argument("--mode", choices=("lsr", "lir"), default=None)
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--clip", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("induce", help="export latent graphs (JSON + DOT) per document")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dot-threshold", type=float, default=0.05)
    p.add_argument("--decode-out", default=None,
                   help="also write greedy-decode JSONL with attention traces")
    p.set_defaults(func=cmd_induce)

    p = sub.add_parser("analyze", help="coverage / copy-length / fusion metrics")
    p.add_argument("--pairs", required=True, help="JSONL with article and summary fields")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None,
                   help="optional; adds latent-graph diversity to each row")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("verify", help="run self-verification suites")
    p.add_argument("--suite", choices=("oracle", "grad", "all"), default="all")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
