"""Command-line surface: corpus preparation, LM pretraining, training,
evaluation, single-input inference, candidate search, and pooling
attribution. Flag precedence is flags > config file > defaults, and all
randomness flows from the single --seed through named substreams.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

from . import corpus as corpus_mod
from . import evaluate as evaluate_mod
from . import train as train_mod
from .lm import pretrain_lm
from .retrieval import pooling_attribution, rank_candidates
from .seeding import stream
from .train import CheckpointError, ConfigError, TrainConfig

ERROR_CODES = (
    (corpus_mod.CorpusFormatError, "E_CORPUS"),
    (ConfigError, "E_CONFIG"),
    (CheckpointError, "E_CHECKPOINT"),
    (FileNotFoundError, "E_MISSING_FILE"),
    (ValueError, "E_INVALID"),
)


def _resolve_config(args):
    config = TrainConfig()
    if getattr(args, "config", None):
        config = train_mod.load_config(args.config, base=config)
    for flag, key in (("seed", "seed"), ("variant", "variant"),
                      ("n_distractors", "val_n_distractors")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(config, key, value)
    return config.validate()


def _digest(paths):
    h = hashlib.sha256()
    for p in sorted(paths):
        with open(p, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def _write_manifest(out_dir, command, args, config, corpus_paths, artifacts,
                    started):
    manifest = {
        "command": command,
        "config_path": getattr(args, "config", None),
        "config": dataclasses.asdict(config),
        "corpus_digest": _digest(corpus_paths) if corpus_paths else None,
        "seed": config.seed,
        "artifacts": sorted(artifacts),
        "wall_clock_seconds": round(time.monotonic() - started, 3),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _prepared_paths(corpus_dir):
    return {
        "train": os.path.join(corpus_dir, "train.jsonl"),
        "valid": os.path.join(corpus_dir, "valid.jsonl"),
        "test": os.path.join(corpus_dir, "test.jsonl"),
        "vocab_code": os.path.join(corpus_dir, "code.vocab"),
        "vocab_query": os.path.join(corpus_dir, "query.vocab"),
    }


def load_prepared(corpus_dir, config):
    """Rebuild encoded splits from a prepared directory, using the current
    config's length caps."""
    paths = _prepared_paths(corpus_dir)
    for p in paths.values():
        if not os.path.exists(p):
            raise FileNotFoundError(f"prepared corpus file missing: {p}")
    vocab_code = corpus_mod.load_vocab(paths["vocab_code"])
    vocab_query = corpus_mod.load_vocab(paths["vocab_query"])

    def encode_split(path):
        return [
            corpus_mod.make_example(
                vocab_code, vocab_query, p["code"], p["query"],
                config.max_code_len, config.max_query_len, index=i,
            )
            for i, p in enumerate(corpus_mod.read_pairs(path))
        ]

    return corpus_mod.CorpusSplits(
        train=encode_split(paths["train"]),
        valid=encode_split(paths["valid"]),
        test=encode_split(paths["test"]),
        vocab_code=vocab_code,
        vocab_query=vocab_query,
        max_code_len=config.max_code_len,
        max_query_len=config.max_query_len,
    )


def _load_model(args, config):
    if not getattr(args, "checkpoint", None):
        raise CheckpointError("this command needs --checkpoint")
    ckpt = train_mod.load_checkpoint(args.checkpoint)
    return ckpt, ckpt.build_model()


def _lm_paths(corpus_dir):
    return (os.path.join(corpus_dir, "lm_code.co3k"),
            os.path.join(corpus_dir, "lm_query.co3k"))


def _read_input(args):
    if getattr(args, "input", None):
        return args.input
    return sys.stdin.read()


# -- command handlers --------------------------------------------------------


def cmd_prepare(args):
    started = time.monotonic()
    config = _resolve_config(args)
    pairs = corpus_mod.read_pairs(args.corpus)
    splits = corpus_mod.prepare_splits(
        pairs, seed=config.seed,
        max_code_len=config.max_code_len, max_query_len=config.max_query_len,
    )
    raw_train, raw_valid, raw_test = corpus_mod.split_corpus(pairs, config.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    paths = _prepared_paths(args.out_dir)
    corpus_mod.write_pairs(raw_train, paths["train"])
    corpus_mod.write_pairs(raw_valid, paths["valid"])
    corpus_mod.write_pairs(raw_test, paths["test"])
    corpus_mod.save_vocab(splits.vocab_code, paths["vocab_code"])
    corpus_mod.save_vocab(splits.vocab_query, paths["vocab_query"])
    _write_manifest(args.out_dir, "prepare", args, config, [args.corpus],
                    list(paths.values()), started)
    print(
        f"prepared {len(raw_train)}/{len(raw_valid)}/{len(raw_test)} pairs; "
        f"vocabs {splits.vocab_code.size}/{splits.vocab_query.size}"
    )
    return 0


def cmd_pretrain_lm(args):
    started = time.monotonic()
    config = _resolve_config(args)
    splits = load_prepared(args.corpus, config)
    out_dir = args.out_dir or args.corpus
    os.makedirs(out_dir, exist_ok=True)
    hidden = config.lm_hidden or config.hidden
    embed_dim = config.lm_embed_dim or config.embed_dim
    artifacts = []
    for side, vocab, seqs in (
        ("code", splits.vocab_code, [ex.code_ids for ex in splits.train]),
        ("query", splits.vocab_query, [ex.query_ids for ex in splits.train]),
    ):
        lm, history = pretrain_lm(
            seqs, side, vocab.size, hidden, embed_dim,
            epochs=config.lm_epochs, lr=config.lr,
            rng=stream(config.seed, "lm-init", side),
            shuffle_rng=stream(config.seed, "lm-shuffle", side),
        )
        path = os.path.join(out_dir, f"lm_{side}.co3k")
        train_mod.save_lm(path, lm, {
            "side": side, "vocab_size": vocab.size,
            "hidden": hidden, "embed_dim": embed_dim,
        })
        artifacts.append(path)
        print(f"lm[{side}]: nll {history[0]:.4f} -> {history[-1]:.4f}")
    _write_manifest(out_dir, "pretrain-lm", args, config,
                    list(_prepared_paths(args.corpus).values()), artifacts,
                    started)
    return 0


def cmd_train(args):
    started = time.monotonic()
    config = _resolve_config(args)
    splits = load_prepared(args.corpus, config)
    flags = train_mod.VARIANTS[config.variant]
    lms = None
    if flags["dual"] and (config.lambda_cs > 0 or config.lambda_cg > 0):
        code_path, query_path = _lm_paths(args.corpus)
        if not (os.path.exists(code_path) and os.path.exists(query_path)):
            raise CheckpointError(
                f"variant {config.variant} needs lm_code.co3k and lm_query.co3k "
                f"in {args.corpus} (run pretrain-lm first)"
            )
        lms = (train_mod.load_lm(code_path), train_mod.load_lm(query_path))
    os.makedirs(args.out_dir, exist_ok=True)
    train_mod.train(splits, config, lms=lms, out_dir=args.out_dir,
                    resume_from=args.resume)
    artifacts = [os.path.join(args.out_dir, name)
                 for name in ("last.co3k", "best.co3k", "train.log")]
    _write_manifest(args.out_dir, "train", args, config,
                    list(_prepared_paths(args.corpus).values()), artifacts,
                    started)
    with open(os.path.join(args.out_dir, "train.log"), encoding="utf-8") as fh:
        print(fh.read().rstrip())
    return 0


def _eval_common(args, which):
    started = time.monotonic()
    config = _resolve_config(args)
    ckpt, model = _load_model(args, config)
    eval_config = dataclasses.replace(
        ckpt.config, seed=config.seed, val_n_distractors=config.val_n_distractors
    )
    splits = load_prepared(args.corpus, eval_config)
    if which == "retrieval":
        report = evaluate_mod.evaluate_retrieval(
            model, splits.test, n_distractors=eval_config.val_n_distractors,
            seed=eval_config.seed,
        )
        name = "retrieval-results.jsonl"
    else:
        report = evaluate_mod.evaluate_summarization(
            model, splits.test, splits.vocab_query,
            max_len=eval_config.max_query_len,
        )
        name = "summarization-results.jsonl"
    os.makedirs(args.out_dir, exist_ok=True)
    out_path = os.path.join(args.out_dir, name)
    evaluate_mod.write_report(report, out_path)
    _write_manifest(args.out_dir, f"eval-{which}", args, eval_config,
                    list(_prepared_paths(args.corpus).values()), [out_path],
                    started)
    print(evaluate_mod.format_table(report))
    return 0


def cmd_eval_retrieval(args):
    return _eval_common(args, "retrieval")


def cmd_eval_summarize(args):
    return _eval_common(args, "summarization")


def cmd_summarize(args):
    config = _resolve_config(args)
    ckpt, model = _load_model(args, config)
    splits_config = ckpt.config
    vocab_code, vocab_query = _load_vocabs(args.corpus)
    tokens = corpus_mod.tokenize(_read_input(args), "code")
    ids = corpus_mod.encode(vocab_code, tokens, splits_config.max_code_len)
    if args.beam and args.beam > 1:
        out = model.beam_decode("summarize", ids, splits_config.max_query_len,
                                beam=args.beam)
    else:
        out = model.greedy_decode("summarize", ids, splits_config.max_query_len)
    print(" ".join(vocab_query.decode(out)))
    return 0


def cmd_generate(args):
    config = _resolve_config(args)
    ckpt, model = _load_model(args, config)
    splits_config = ckpt.config
    vocab_code, vocab_query = _load_vocabs(args.corpus)
    tokens = corpus_mod.tokenize(_read_input(args), "query")
    ids = corpus_mod.encode(vocab_query, tokens, splits_config.max_query_len)
    if args.beam and args.beam > 1:
        out = model.beam_decode("generate", ids, splits_config.max_code_len,
                                beam=args.beam)
    else:
        out = model.greedy_decode("generate", ids, splits_config.max_code_len)
    print(" ".join(vocab_code.decode(out)))
    return 0


def _load_vocabs(corpus_dir):
    paths = _prepared_paths(corpus_dir)
    return (corpus_mod.load_vocab(paths["vocab_code"]),
            corpus_mod.load_vocab(paths["vocab_query"]))


def cmd_search(args):
    config = _resolve_config(args)
    ckpt, model = _load_model(args, config)
    vocab_code, vocab_query = _load_vocabs(args.corpus)
    with open(args.candidates, "r", encoding="utf-8") as fh:
        snippets = [line.rstrip("\n") for line in fh if line.strip()]
    if not snippets:
        raise ValueError(f"candidate file {args.candidates} is empty")
    query_ids = corpus_mod.encode(
        vocab_query, corpus_mod.tokenize(args.query, "query"),
        ckpt.config.max_query_len,
    )
    candidate_ids = [
        corpus_mod.encode(vocab_code, corpus_mod.tokenize(s, "code"),
                          ckpt.config.max_code_len)
        for s in snippets
    ]
    scored = rank_candidates(query_ids, candidate_ids, model)
    by_rank = sorted(scored, key=lambda s: s.rank)
    for s in by_rank:
        print(f"{s.rank}\t{s.score:.6f}\t{snippets[s.candidate_id]}")
    return 0


def cmd_attribute(args):
    config = _resolve_config(args)
    ckpt, model = _load_model(args, config)
    vocab_code, vocab_query = _load_vocabs(args.corpus)
    side = args.side
    vocab = vocab_code if side == "code" else vocab_query
    max_len = ckpt.config.max_code_len if side == "code" else ckpt.config.max_query_len
    tokens = corpus_mod.tokenize(_read_input(args), side)
    ids = corpus_mod.encode(vocab, tokens, max_len)
    counts = pooling_attribution(ids, model, side=side)
    labels = [vocab.id_to_token[i] for i in ids]
    for label, count in zip(labels, counts):
        print(f"{label}\t{count}")
    return 0


# -- argument wiring ---------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="co3",
        description="Joint code retrieval, summarization, and generation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=True, checkpoint=False, out_dir=False):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--variant", default=None,
                       choices=sorted(train_mod.VARIANTS))
        if corpus:
            p.add_argument("--corpus", required=True,
                           help="pair file (prepare) or prepared directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        if out_dir:
            p.add_argument("--out-dir", required=True)

    p = sub.add_parser("prepare", help="tokenize, split, and build vocabularies")
    common(p, out_dir=True)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("pretrain-lm", help="train both side language models")
    common(p)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_pretrain_lm)

    p = sub.add_parser("train", help="run joint training")
    common(p, out_dir=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-retrieval", help="distractor-pool ranking metrics")
    common(p, checkpoint=True, out_dir=True)
    p.add_argument("--n-distractors", type=int, default=None)
    p.set_defaults(fn=cmd_eval_retrieval)

    p = sub.add_parser("eval-summarize", help="BLEU/METEOR on greedy decodes")
    common(p, checkpoint=True, out_dir=True)
    p.add_argument("--n-distractors", type=int, default=None)
    p.set_defaults(fn=cmd_eval_summarize)

    p = sub.add_parser("summarize", help="decode a query for one code snippet")
    common(p, checkpoint=True)
    p.add_argument("--input", default=None, help="code text (default: stdin)")
    p.add_argument("--beam", type=int, default=None)
    p.set_defaults(fn=cmd_summarize)

    p = sub.add_parser("generate", help="decode code for one query")
    common(p, checkpoint=True)
    p.add_argument("--input", default=None, help="query text (default: stdin)")
    p.add_argument("--beam", type=int, default=None)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("search", help="rank a candidate file for one query")
    common(p, checkpoint=True)
    p.add_argument("--query", required=True)
    p.add_argument("--candidates", required=True,
                   help="text file, one code snippet per line")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("attribute", help="max-pool attribution table")
    common(p, checkpoint=True)
    p.add_argument("--input", default=None, help="text (default: stdin)")
    p.add_argument("--side", choices=("code", "query"), default="query")
    p.set_defaults(fn=cmd_attribute)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except tuple(exc for exc, _ in ERROR_CODES) as exc:
        for exc_type, code in ERROR_CODES:
            if isinstance(exc, exc_type):
                print(f"{code}: {exc}", file=sys.stderr)
                return 1
        raise  # unreachable


if __name__ == "__main__":
    sys.exit(main())
