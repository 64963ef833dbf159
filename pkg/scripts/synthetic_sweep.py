#!/usr/bin/env python3
"""Train adaptive / Wait-k models on the toy copy and reversal tasks and print a latency/BLEU table.

    python scripts/synthetic_sweep.py --alphas 0 0.05 0.2 --tasks copy reverse --seed 1
"""

import argparse
import time

from simulmt.evaluate import decode_corpus, score
from simulmt.synthetic import make_split
from simulmt.trainer import TrainConfig, fit


def run(task, mode, alpha, k, seed, epochs, data_seed=0):
    split = make_split(task, seed=data_seed)
    cfg = TrainConfig(mode=mode, k=k, alpha=alpha, embed_dim=32, hidden_dim=64, dropout=0.0,
                      learning_rate=3e-3, max_epochs=epochs, seed=seed)
    start = time.perf_counter()
    result = fit(cfg, split.train, split.valid, split.src_vocab.size, split.tgt_vocab.size)
    traces = decode_corpus(result.params, [p.source_ids for p in split.test], mode, k)
    metrics = score(traces, [p.target_ids for p in split.test])
    return metrics, time.perf_counter() - start


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tasks", nargs="+", default=["copy", "reverse"])
    ap.add_argument("--alphas", nargs="+", type=float, default=[0.0, 0.05, 0.2])
    ap.add_argument("--waitk", nargs="*", type=int, default=[], help="also train Wait-k baselines")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=40)
    args = ap.parse_args()

    print("task\tmode\talpha\tk\tbleu\tlat_mean\tlat_std\tseconds", flush=True)
    for task in args.tasks:
        for k in args.waitk:
            m, secs = run(task, "waitk", 0.0, k, args.seed, args.epochs)
            print(f"{task}\twaitk\t-\t{k}\t{m.bleu:.2f}\t{m.latency.mean:.2f}\t{m.latency.std:.2f}\t{secs:.0f}", flush=True)
        for alpha in args.alphas:
            m, secs = run(task, "adaptive", alpha, 1, args.seed, args.epochs)
            print(f"{task}\tadaptive\t{alpha}\t-\t{m.bleu:.2f}\t{m.latency.mean:.2f}\t{m.latency.std:.2f}\t{secs:.0f}",
                  flush=True)


if __name__ == "__main__":
    main()
