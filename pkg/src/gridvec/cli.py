"""Command-line pipeline: vocab, preprocess, train, export, eval, bandwidth.

Training runs in one of three modes:

  local-sim  spawn shards in-process and drive them through the full
             protocol codec; the whole pipeline runs in one process.
  shard      serve one parameter-server shard on a TCP endpoint.
  client     drive training against already-running shards listed in an
             endpoints file.

Option precedence is flags > config file > built-in defaults; the config
file is flat key=value text.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import client as client_mod
from . import evaluate, transport
from .client import (LoopbackConnection, TrainConfig, connect_all,
                     fetch_matrix, read_endpoints, train)
from .corpus import (EmptyVocabularyError, IndexedCorpus, Vocabulary,
                     build_vocabulary, preprocess, tokens_from_text)
from .sampler import build_noise_table
from .shard import ShardHandler, serve
from .store import (init_store, make_layout, save_vectors_text)

CONFIG_KEYS = {
    "dim": int, "shards": int, "window": int, "negatives": int,
    "batch_size": int, "epochs": int, "alpha": float, "alpha_min": float,
    "subsample": float, "min_count": int, "seed": int, "threads": int,
    "interleaved": lambda v: v.lower() in ("1", "true", "yes"),
}

DEFAULTS = {
    "dim": 100, "shards": 1, "window": 5, "negatives": 5, "batch_size": 1,
    "epochs": 1, "alpha": 0.025, "alpha_min": None, "subsample": 1e-4,
    "min_count": 5, "seed": 1, "threads": 1, "interleaved": False,
}


def load_config_file(path: str) -> dict:
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, _, raw = line.partition("=")
            key = key.strip().replace("-", "_")
            if key not in CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = CONFIG_KEYS[key](raw.strip())
    return values


def build_train_config(args) -> TrainConfig:
    layered = dict(DEFAULTS)
    if getattr(args, "config", None):
        layered.update(load_config_file(args.config))
    for key in DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            layered[key] = flag
    return TrainConfig(**layered)


def write_manifest(path: str, manifest: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--dim", type=int)
    p.add_argument("--shards", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--negatives", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--alpha-min", dest="alpha_min", type=float)
    p.add_argument("--subsample", type=float)
    p.add_argument("--min-count", dest="min_count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--interleaved", action="store_const", const=True, default=None)


def cmd_vocab(args) -> int:
    with open(args.corpus, encoding="utf-8") as f:
        text = f.read()
    try:
        vocab = build_vocabulary(tokens_from_text(text), args.min_count, args.max_vocab)
    except EmptyVocabularyError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    vocab.save(args.output)
    print(f"vocabulary: {len(vocab)} words -> {args.output}")
    return 0


def cmd_preprocess(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    with open(args.corpus, encoding="utf-8") as f:
        text = f.read()
    corpus = preprocess(tokens_from_text(text), vocab)
    corpus.save(args.output)
    print(f"indexed corpus: {corpus.total_tokens} tokens, "
          f"{len(corpus.sentences)} sentences -> {args.output}")
    return 0


def _train_local_sim(args, config: TrainConfig, vocab: Vocabulary,
                     corpus: IndexedCorpus) -> int:
    layout = make_layout(config.dim, config.shards)
    noise = build_noise_table(vocab)
    meter = transport.BandwidthMeter()
    handlers = [ShardHandler(init_store(s, layout, len(vocab), config.seed), noise)
                for s in range(config.shards)]
    conns = [LoopbackConnection(h, meter) for h in handlers]
    stats = train(corpus, vocab, config, conns, meter)
    full = fetch_matrix(conns, transport.MATRIX_U)
    save_vectors_text(args.output, vocab.words, full)
    print(f"trained {stats.steps} steps over {stats.input_words} input words "
          f"in {stats.seconds:.1f}s -> {args.output}")
    _finish_train_manifest(args, config, stats, meter, mode="local-sim")
    return 0


def _train_client(args, config: TrainConfig, vocab: Vocabulary,
                  corpus: IndexedCorpus) -> int:
    meter = transport.BandwidthMeter()
    conns = connect_all(read_endpoints(args.endpoints_file), meter)
    if len(conns) != config.shards:
        print(f"error: endpoints file lists {len(conns)} shards, "
              f"config says {config.shards}", file=sys.stderr)
        return 1
    try:
        stats = train(corpus, vocab, config, conns, meter)
    finally:
        for c in conns:
            c.close()
    print(f"trained {stats.steps} steps over {stats.input_words} input words "
          f"in {stats.seconds:.1f}s against {len(conns)} shards")
    _finish_train_manifest(args, config, stats, meter, mode="client",
                           endpoints=args.endpoints_file)
    return 0


def _train_shard(args, config: TrainConfig, vocab: Vocabulary) -> int:
    host, _, port = args.listen.rpartition(":")
    layout = make_layout(config.dim, config.shards)
    store = init_store(args.shard_id, layout, len(vocab), config.seed)
    noise = build_noise_table(vocab)
    server = serve(store, noise, host or "127.0.0.1", int(port),
                   workers=args.workers)
    print(f"shard {args.shard_id}/{config.shards} serving columns "
          f"[{store.lo}, {store.hi}) on {server.host}:{server.port}")
    try:
        server.join()
    except KeyboardInterrupt:
        server.stop()
    return 0


def _finish_train_manifest(args, config: TrainConfig, stats, meter,
                           mode: str, endpoints: str | None = None) -> None:
    if not getattr(args, "manifest", None):
        return
    manifest = {
        "mode": mode,
        "config": {k: getattr(config, k) for k in DEFAULTS},
        "inputs": {"corpus": args.corpus, "vocab": args.vocab},
        "output": getattr(args, "output", None),
        "endpoints_file": endpoints,
        "stats": {
            "steps": stats.steps, "input_words": stats.input_words,
            "pairs": stats.pairs, "negatives": stats.negatives,
            "retries": stats.retries, "seconds": stats.seconds,
        },
        "bandwidth": meter.snapshot(),
        "finished_unix": time.time(),
    }
    write_manifest(args.manifest, manifest)
    print(f"manifest -> {args.manifest}")


def cmd_train(args) -> int:
    config = build_train_config(args)
    vocab = Vocabulary.load(args.vocab)
    if args.mode == "shard":
        return _train_shard(args, config, vocab)
    corpus = IndexedCorpus.load(args.corpus)
    if args.mode == "local-sim":
        return _train_local_sim(args, config, vocab, corpus)
    return _train_client(args, config, vocab, corpus)


def cmd_export(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    conns = connect_all(read_endpoints(args.endpoints_file))
    try:
        full = fetch_matrix(conns, transport.MATRIX_U)
        if len(vocab) != full.shape[0]:
            print("error: shard vocabulary size does not match vocab file",
                  file=sys.stderr)
            return 1
        save_vectors_text(args.output, vocab.words, full)
        print(f"exported {full.shape[0]} x {full.shape[1]} vectors -> {args.output}")
        if args.shutdown:
            for c in conns:
                c.call(transport.OP_SHUTDOWN)
    finally:
        for c in conns:
            c.close()
    return 0


def cmd_eval(args) -> int:
    embeddings = evaluate.EmbeddingSet.load(args.vectors)
    print(f"embeddings: {len(embeddings)} words, dim {embeddings.matrix.shape[1]}")
    if args.wordsim:
        judgments = evaluate.SimilarityJudgments.load(args.wordsim)
        rho, used = evaluate.spearman(embeddings, judgments)
        print(f"wordsim spearman rho {rho:.4f} over {used} pairs "
              f"({len(judgments.pairs) - used} skipped)")
    if args.analogies:
        questions = evaluate.load_analogies(args.analogies)
        acc, used, skipped = evaluate.analogy_accuracy(embeddings, questions)
        shown = "n/a" if acc is None else f"{acc:.4f}"
        print(f"analogy accuracy {shown} over {used} questions ({skipped} skipped)")
    if args.neighbors:
        for token, score in evaluate.top_k(embeddings, args.neighbors,
                                           args.top_k, args.threshold):
            print(f"  {token}  {score:.4f}")
    if args.agree_with:
        other = evaluate.EmbeddingSet.load(args.agree_with)
        common = [w for w in embeddings.words if w in other.index]
        pairs = evaluate.sample_pairs(common, args.pairs, args.seed or 0)
        report = evaluate.agreement_report(embeddings, other, pairs)
        print(report.as_text())
    return 0


def cmd_bandwidth(args) -> int:
    if args.conventional:
        r = transport.predicted_conventional_bytes(args.w, args.n, args.d)
        print(f"{r:.0f}")
        return 0
    r_prime = transport.predicted_proposed_bytes(args.w, args.n, args.shards)
    print(f"proposed r'({args.w},{args.n},S={args.shards}) = {r_prime:.0f} "
          f"bytes/word/direction")
    if args.d:
        r = transport.predicted_conventional_bytes(args.w, args.n, args.d)
        print(f"conventional r({args.w},{args.n},d={args.d}) = {r:.0f} bytes/word")
        print(f"ratio approx S/d = {transport.bandwidth_ratio(args.shards, args.d):.4f}")
    if args.manifest:
        with open(args.manifest, encoding="utf-8") as f:
            manifest = json.load(f)
        meter = transport.BandwidthMeter()
        bw = manifest["bandwidth"]
        meter.minibatch_words = bw["minibatch_words"]
        meter.pairs = bw["pairs"]
        meter.negatives = bw["negatives"]
        meter.fg_bytes_sent = bw["fg_bytes_sent"]
        meter.fg_bytes_received = bw["fg_bytes_received"]
        meter.index_bytes_sent = bw["index_bytes_sent"]
        meter.bytes_sent = bw["bytes_sent"]
        meter.bytes_received = bw["bytes_received"]
        report = transport.measured_vs_predicted(meter, args.w, args.n,
                                                 args.shards, args.d)
        print(report.as_text())
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="gridvec",
        description="Distributed word2vec with column-partitioned parameter-server shards")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("vocab", help="count tokens and write the vocabulary file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--min-count", dest="min_count", type=int, default=5)
    p.add_argument("--max-vocab", dest="max_vocab", type=int)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("preprocess", help="index the corpus against a vocabulary")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train vectors (local-sim, shard, or client mode)")
    p.add_argument("--mode", choices=["local-sim", "shard", "client"],
                   default="local-sim")
    p.add_argument("--corpus")
    p.add_argument("--vocab", required=True)
    p.add_argument("--output")
    p.add_argument("--manifest")
    p.add_argument("--endpoints-file", dest="endpoints_file")
    p.add_argument("--listen", help="host:port for shard mode")
    p.add_argument("--shard-id", dest="shard_id", type=int)
    p.add_argument("--workers", type=int)
    _add_train_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export", help="assemble vectors from running shards")
    p.add_argument("--endpoints-file", dest="endpoints_file", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--shutdown", action="store_true",
                   help="send SHUTDOWN to all shards after export")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("eval", help="evaluate exported vectors")
    p.add_argument("--vectors", required=True)
    p.add_argument("--wordsim")
    p.add_argument("--analogies")
    p.add_argument("--neighbors", help="print top-K neighbors of this token")
    p.add_argument("--top-k", dest="top_k", type=int, default=10)
    p.add_argument("--threshold", type=float)
    p.add_argument("--agree-with", dest="agree_with")
    p.add_argument("--pairs", type=int, default=5000)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bandwidth", help="traffic model predictions and comparisons")
    p.add_argument("--conventional", action="store_true",
                   help="print only the conventional-PS bytes per word")
    p.add_argument("-w", type=float, default=10, help="average contexts per word")
    p.add_argument("-n", type=int, default=5, help="negatives per context")
    p.add_argument("-d", type=int, help="vector dimension")
    p.add_argument("-S", "--shards", type=int, default=1)
    p.add_argument("--manifest", help="compare against a training manifest")
    p.set_defaults(func=cmd_bandwidth)

    args = parser.parse_args(argv)
    if args.command == "train":
        if args.mode == "shard":
            missing = [f for f in ("listen", "shard_id") if getattr(args, f) is None]
            if missing:
                parser.error(f"shard mode requires --{' --'.join(m.replace('_', '-') for m in missing)}")
        else:
            missing = [f for f in ("corpus", "output") if getattr(args, f) is None]
            if missing and args.mode == "local-sim":
                parser.error(f"local-sim mode requires --{' --'.join(missing)}")
            if args.mode == "client" and (args.corpus is None or args.endpoints_file is None):
                parser.error("client mode requires --corpus and --endpoints-file")
    if args.command == "bandwidth" and args.conventional and args.d is None:
        parser.error("--conventional requires -d")
    try:
        return args.func(args)
    except (OSError, ValueError, transport.ProtocolError,
            transport.ShardCallError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
