"""Command-line entry point: ``simulmt {bpe-train,train,translate,evaluate,oracle-check}``.

Run settings come from an optional ``key=value`` file (``--config``) and are
overridden by flags.  ``train`` writes the fully resolved settings to
``<run_dir>/config.txt``, which is itself a valid ``--config`` file.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import threadpoolctl

from .data import BpeModel, Vocabulary, debpe, encode_pairs, filter_pairs, load_parallel_corpus, train_bpe
from .evaluate import MetricsReport, bleu, decode_corpus, latency
from .model import params_from_checkpoint, read_checkpoint
from .oracle import run_oracle_suite
from .trainer import TrainConfig, fit

log = logging.getLogger("simulmt")

TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
PATH_KEYS = ("train_src", "train_tgt", "valid_src", "valid_tgt", "src_bpe", "tgt_bpe", "src_vocab",
             "tgt_vocab", "run_dir")
EXTRA_KEYS = {"src_vocab_size": int, "tgt_vocab_size": int, "max_len": int, "max_ratio": float, "threads": int}
DEFAULTS = {"src_vocab_size": 4000, "tgt_vocab_size": 4000, "max_len": 60, "max_ratio": 9.0, "threads": 1}
FLAG_ALIASES = {"lr": "learning_rate", "epochs": "max_epochs"}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# run configuration


def _coerce(key: str, value: str):
    kind = TRAIN_KEYS.get(key) or EXTRA_KEYS.get(key)
    if key in PATH_KEYS:
        return value
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise UsageError(f"{origin}:{n}: expected key=value")
        if key not in TRAIN_KEYS and key not in EXTRA_KEYS and key not in PATH_KEYS:
            raise UsageError(f"{origin}:{n}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, value)
        except ValueError:
            raise UsageError(f"{origin}:{n}: bad value for {key}: {value!r}") from None
    return out


def resolve_config(config_path: str | None, overrides: dict) -> dict:
    resolved = dict(DEFAULTS)
    resolved.update({f.name: f.default for f in dataclasses.fields(TrainConfig)})
    if config_path:
        resolved.update(parse_config_text(Path(config_path).read_text(encoding="utf-8"), config_path))
    resolved.update({k: v for k, v in overrides.items() if v is not None})
    return resolved


def format_config(cfg: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.items() if v is not None)


def train_config_from(cfg: dict) -> TrainConfig:
    return TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS if k in cfg})


# --------------------------------------------------------------------------
# subcommands


def cmd_bpe_train(args) -> str:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = load_parallel_corpus(args.src_train, args.tgt_train, max_len=10**9, max_ratio=float("inf"))
    results = []
    for side, sents, merges, size in (
        ("src", [s for s, _ in report.pairs], args.src_merges, args.src_vocab_size),
        ("tgt", [t for _, t in report.pairs], args.tgt_merges, args.tgt_vocab_size),
    ):
        model = train_bpe(sents, merges)
        model.save(out_dir / f"bpe.{side}")
        vocab = Vocabulary.build((model.apply(s) for s in sents), size, target=(side == "tgt"))
        vocab.save(out_dir / f"vocab.{side}")
        results.append(f"{side}_merges={len(model.merges)} {side}_vocab={vocab.size}")
    return "OK bpe-train " + " ".join(results)


def _segment(pairs, src_bpe: BpeModel | None, tgt_bpe: BpeModel | None):
    return [
        (src_bpe.apply(s) if src_bpe else s, tgt_bpe.apply(t) if tgt_bpe else t)
        for s, t in pairs
    ]


def cmd_train(args, overrides: dict) -> str:
    cfg = resolve_config(args.config, overrides)
    for key in ("train_src", "train_tgt", "valid_src", "valid_tgt", "run_dir"):
        if not cfg.get(key):
            raise UsageError(f"missing required setting {key}")
    train_cfg = train_config_from(cfg)
    run_dir = Path(cfg["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    src_bpe = BpeModel.load(cfg["src_bpe"]) if cfg.get("src_bpe") else None
    tgt_bpe = BpeModel.load(cfg["tgt_bpe"]) if cfg.get("tgt_bpe") else None
    unfiltered = 10**9, float("inf")
    train_raw = _segment(load_parallel_corpus(cfg["train_src"], cfg["train_tgt"], *unfiltered).pairs, src_bpe, tgt_bpe)
    valid_raw = _segment(load_parallel_corpus(cfg["valid_src"], cfg["valid_tgt"], *unfiltered).pairs, src_bpe, tgt_bpe)
    kept = filter_pairs(train_raw, cfg["max_len"], cfg["max_ratio"])
    log.info("training pairs: kept %d of %d (dropped %d)", len(kept.pairs), kept.total, kept.dropped)
    valid = filter_pairs(valid_raw, 10**9, float("inf")).pairs

    if cfg.get("src_vocab"):
        src_vocab = Vocabulary.load(cfg["src_vocab"])
    else:
        src_vocab = Vocabulary.build((s for s, _ in kept.pairs), cfg["src_vocab_size"], target=False)
        cfg["src_vocab"] = str(run_dir / "vocab.src")
        src_vocab.save(cfg["src_vocab"])
    if cfg.get("tgt_vocab"):
        tgt_vocab = Vocabulary.load(cfg["tgt_vocab"])
    else:
        tgt_vocab = Vocabulary.build((t for _, t in kept.pairs), cfg["tgt_vocab_size"], target=True)
        cfg["tgt_vocab"] = str(run_dir / "vocab.tgt")
        tgt_vocab.save(cfg["tgt_vocab"])
    (run_dir / "config.txt").write_text(format_config(cfg), encoding="utf-8")

    result = fit(train_cfg, encode_pairs(kept.pairs, src_vocab, tgt_vocab), encode_pairs(valid, src_vocab, tgt_vocab),
                 src_vocab.size, tgt_vocab.size, run_dir)
    return f"OK train epochs={train_cfg.max_epochs} best_epoch={result.state.best_epoch} best_val={result.state.best_val:.6f}"


@dataclasses.dataclass
class LoadedRun:
    config: dict
    train_config: TrainConfig
    params: object
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    src_bpe: BpeModel | None


def load_run(run_dir) -> LoadedRun:
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.txt"
    ckpt_path = run_dir / "best.ckpt"
    if not cfg_path.exists() or not ckpt_path.exists():
        raise UsageError(f"{run_dir} is not a finished run directory (need config.txt and best.ckpt)")
    cfg = resolve_config(str(cfg_path), {})
    train_cfg = train_config_from(cfg)
    src_vocab, tgt_vocab = Vocabulary.load(cfg["src_vocab"]), Vocabulary.load(cfg["tgt_vocab"])
    ckpt = read_checkpoint(ckpt_path)
    params = params_from_checkpoint(ckpt, train_cfg.model_config(src_vocab.size, tgt_vocab.size))
    src_bpe = BpeModel.load(cfg["src_bpe"]) if cfg.get("src_bpe") else None
    return LoadedRun(cfg, train_cfg, params, src_vocab, tgt_vocab, src_bpe)


def _read_sources(path, run: LoadedRun) -> list[list[int]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out = []
    for n, line in enumerate(lines, start=1):
        toks = line.split()
        if not toks:
            raise UsageError(f"{path}: line {n} is empty")
        if run.src_bpe:
            toks = run.src_bpe.apply(toks)
        out.append(run.src_vocab.encode(toks))
    return out


def _decode(args, run: LoadedRun):
    mode = args.mode or run.train_config.mode
    k = args.k or run.train_config.k
    sources = _read_sources(args.src, run)
    traces = decode_corpus(run.params, sources, mode, k, max_len=args.max_len)
    hyps = [debpe(run.tgt_vocab.decode(t.output_tokens())) for t in traces]
    return traces, hyps


def _write_traces(path, traces, vocab) -> None:
    Path(path).write_text("".join(t.format(vocab) + "\n" for t in traces), encoding="utf-8")


def cmd_translate(args) -> str:
    run = load_run(args.run_dir)
    traces, hyps = _decode(args, run)
    text = "".join(h + "\n" for h in hyps)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.emit_traces:
        _write_traces(args.emit_traces, traces, run.tgt_vocab)
    return f"OK translate n_sentences={len(hyps)}"


def cmd_evaluate(args) -> str:
    run = load_run(args.run_dir)
    traces, hyps = _decode(args, run)
    refs = [line.split() for line in Path(args.ref).read_text(encoding="utf-8").splitlines()]
    if len(refs) != len(hyps):
        raise UsageError(f"{len(hyps)} source lines but {len(refs)} reference lines")
    report = MetricsReport(bleu([h.split() for h in hyps], refs), latency(traces), len(hyps))
    out = Path(args.out) if args.out else Path(args.run_dir) / "metrics.tsv"
    out.write_text(report.tsv() + "\n", encoding="utf-8")
    if args.emit_traces:
        _write_traces(args.emit_traces, traces, run.tgt_vocab)
    return report.tsv()


def cmd_oracle_check(args) -> str:
    report = run_oracle_suite(args.trials, args.seed)
    if not report.ok:
        raise CheckFailed(f"FAIL {report.passed}/{report.trials} {report.failures[0]}")
    return f"OK {report.passed}/{report.trials}"


class CheckFailed(Exception):
    pass


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simulmt", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread count (default 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bpe-train", help="learn BPE merges and vocabularies for both sides")
    p.add_argument("--src-train", required=True)
    p.add_argument("--tgt-train", required=True)
    p.add_argument("--src-merges", type=int, default=4000)
    p.add_argument("--tgt-merges", type=int, default=4000)
    p.add_argument("--src-vocab-size", type=int, default=4000)
    p.add_argument("--tgt-vocab-size", type=int, default=4000)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train", help="train a model; writes config.txt, train_log.tsv, best.ckpt")
    p.add_argument("--config")
    for key in PATH_KEYS:
        p.add_argument("--" + key.replace("_", "-"), dest=key)
    p.add_argument("--mode", choices=("full", "waitk", "adaptive"))
    p.add_argument("--k", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--clip-norm", type=float, dest="clip_norm")
    p.add_argument("--dropout", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    p.add_argument("--layers", type=int)
    p.add_argument("--wait-bias", type=float, dest="wait_bias")
    p.add_argument("--src-vocab-size", type=int, dest="src_vocab_size")
    p.add_argument("--tgt-vocab-size", type=int, dest="tgt_vocab_size")
    p.add_argument("--max-len", type=int, dest="max_len")
    p.add_argument("--max-ratio", type=float, dest="max_ratio")

    for name, helptext in (("translate", "decode a source file"), ("evaluate", "decode and score against references")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--run-dir", required=True)
        p.add_argument("--src", required=True)
        if name == "evaluate":
            p.add_argument("--ref", required=True)
        p.add_argument("--out")
        p.add_argument("--mode", choices=("full", "waitk", "adaptive"))
        p.add_argument("--k", type=int)
        p.add_argument("--max-len", type=int, dest="max_len")
        p.add_argument("--emit-traces", metavar="PATH")

    p = sub.add_parser("oracle-check", help="CTC brute-force and finite-difference self-checks")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=7)
    return parser


TRAIN_OVERRIDE_KEYS = set(PATH_KEYS) | set(TRAIN_KEYS) | set(EXTRA_KEYS) | set(FLAG_ALIASES)


def _train_overrides(args) -> dict:
    out = {}
    for key, value in vars(args).items():
        if key in TRAIN_OVERRIDE_KEYS and key != "config":
            out[FLAG_ALIASES.get(key, key)] = value
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    threads = args.threads
    try:
        if args.command == "train" and threads is None:
            threads = resolve_config(args.config, {}).get("threads")
        with threadpoolctl.threadpool_limits(limits=threads or 1):
            if args.command == "bpe-train":
                message = cmd_bpe_train(args)
            elif args.command == "train":
                message = cmd_train(args, _train_overrides(args))
            elif args.command == "translate":
                message = cmd_translate(args)
            elif args.command == "evaluate":
                message = cmd_evaluate(args)
            else:
                message = cmd_oracle_check(args)
    except CheckFailed as exc:
        print(str(exc))
        return 1
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - one-line reason for any failure
        print(f"error: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
