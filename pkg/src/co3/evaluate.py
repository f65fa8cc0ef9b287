"""Evaluation protocols: distractor-pool retrieval ranking, greedy-decode
summarization scoring, and the BLEU-bucketed MRR breakdown."""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .metrics import bleu4, meteor, mrr, ndcg, sentence_bleu
from .retrieval import score
from .seeding import stream
from .autodiff import Tensor


@dataclass
class EvalReport:
    """Per-example records plus recomputable aggregates."""

    per_example: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    bleu_buckets: list | None = None


def _pooled_vectors(model, pairs, side, batch_size=64):
    """Pooled encoder vectors for every pair, row i = pairs[i]."""
    rows = [p.code_ids if side == "code" else p.query_ids for p in pairs]
    out = np.empty((len(rows), model.hidden))
    for lo in range(0, len(rows), batch_size):
        chunk = rows[lo : lo + batch_size]
        width = max(len(r) for r in chunk)
        mat = np.zeros((len(chunk), width), dtype=np.int64)
        mask = np.zeros_like(mat, dtype=bool)
        for i, r in enumerate(chunk):
            mat[i, : len(r)] = r
            mask[i, : len(r)] = True
        pooled = model.pooled_code(mat, mask) if side == "code" else model.pooled_query(mat, mask)
        out[lo : lo + len(chunk)] = pooled.vector.data
    return out


def _draw_pools(n_pairs, n_distractors, rng):
    """For each pair, the gold index followed by distinct other indices."""
    pools = []
    for i in range(n_pairs):
        others = rng.permutation(n_pairs - 1)[:n_distractors]
        distractors = np.where(others >= i, others + 1, others)
        pools.append(np.concatenate(([i], distractors)))
    return pools


def retrieval_pools(model, pairs, n_distractors, rng):
    """Gold ranks and scores over seeded 1 + n_distractors candidate pools.

    The gold snippet is candidate 0, so score ties resolve in its favor
    (ties break by input order). Returns a list of (rank, gold_score).
    """
    if n_distractors >= len(pairs):
        n_distractors = len(pairs) - 1
        warnings.warn(
            f"test set too small; lowering n_distractors to {n_distractors}"
        )
    if n_distractors < 1:
        raise ValueError("need at least 2 pairs for retrieval evaluation")
    code_vecs = _pooled_vectors(model, pairs, "code")
    query_vecs = _pooled_vectors(model, pairs, "query")
    results = []
    for i, pool in enumerate(_draw_pools(len(pairs), n_distractors, rng)):
        q = Tensor(np.repeat(query_vecs[i : i + 1], len(pool), axis=0))
        c = Tensor(code_vecs[pool])
        scores = score(c, q, model.retrieval).data
        gold_score = scores[0]
        rank = 1 + int((scores[1:] > gold_score).sum())
        results.append((rank, float(gold_score)))
    return results


def retrieval_ranks(model, pairs, n_distractors, rng):
    return [rank for rank, _ in retrieval_pools(model, pairs, n_distractors, rng)]


def evaluate_retrieval(model, test_pairs, n_distractors=49, seed=0):
    """The distractor-pool protocol: rank each pair's gold code among
    n_distractors seeded draws, aggregate MRR and NDCG."""
    rng = stream(seed, "distractors")
    results = retrieval_pools(model, test_pairs, n_distractors, rng)
    report = EvalReport()
    for i, (rank, gold_score) in enumerate(results):
        report.per_example.append(
            {"example": i, "gold_rank": rank, "retrieval_score": gold_score}
        )
    ranks = [r for r, _ in results]
    report.aggregates = {"mrr": mrr(ranks), "ndcg": ndcg(ranks),
                         "n_examples": len(ranks), "n_distractors": n_distractors}
    return report


def evaluate_summarization(model, test_pairs, vocab_query, max_len=200):
    """Greedy-decode each code snippet and score against the raw query
    tokens: corpus BLEU-4 plus per-example sentence BLEU and METEOR."""
    report = EvalReport()
    decoded = []
    for i, ex in enumerate(test_pairs):
        out_ids = model.greedy_decode("summarize", ex.code_ids, max_len)
        tokens = vocab_query.decode(out_ids)
        decoded.append(tokens)
        report.per_example.append(
            {
                "example": i,
                "summary": tokens,
                "sentence_bleu": sentence_bleu(tokens, ex.raw_query),
                "meteor": meteor(tokens, ex.raw_query),
            }
        )
    references = [ex.raw_query for ex in test_pairs]
    report.aggregates = {
        "bleu4": bleu4(decoded, references),
        "mean_meteor": float(
            np.mean([r["meteor"] for r in report.per_example])
        ) if report.per_example else 0.0,
        "n_examples": len(test_pairs),
    }
    return report


def bleu_bucket_analysis(records):
    """Ten BLEU buckets of width 0.1 (the last closed at 1.0) with per-bucket
    counts and mean MRR. `records` carry "bleu" and "rank"."""
    buckets = []
    for k in range(10):
        low, high = k / 10.0, (k + 1) / 10.0
        if k < 9:
            members = [r for r in records if low <= r["bleu"] < high]
        else:
            members = [r for r in records if low <= r["bleu"] <= high]
        buckets.append(
            {
                "low": low,
                "high": high,
                "count": len(members),
                "mean_mrr": mrr([r["rank"] for r in members]) if members else 0.0,
            }
        )
    return buckets


def evaluate_model(model, test_pairs, vocab_query, n_distractors=49, seed=0,
                   max_summary_len=200):
    """Full protocol: retrieval and summarization per example, aggregate
    metrics, and the BLEU-bucketed MRR breakdown."""
    retr = evaluate_retrieval(model, test_pairs, n_distractors, seed)
    summ = evaluate_summarization(model, test_pairs, vocab_query, max_summary_len)
    report = EvalReport()
    for r, s in zip(retr.per_example, summ.per_example):
        merged = dict(r)
        merged.update({k: v for k, v in s.items() if k != "example"})
        report.per_example.append(merged)
    report.aggregates = {**retr.aggregates, **summ.aggregates}
    report.bleu_buckets = bleu_bucket_analysis(
        [{"bleu": r["sentence_bleu"], "rank": r["gold_rank"]}
         for r in report.per_example]
    )
    return report


def write_report(report, path):
    """Line-delimited records: one per example, then one aggregate record."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in report.per_example:
            fh.write(json.dumps({"kind": "example", **rec}, sort_keys=True) + "\n")
        agg = {"kind": "aggregate", **report.aggregates}
        if report.bleu_buckets is not None:
            agg["bleu_buckets"] = report.bleu_buckets
        fh.write(json.dumps(agg, sort_keys=True) + "\n")


def format_table(report):
    """Human-readable aggregate table."""
    lines = ["metric\tvalue"]
    for key in sorted(report.aggregates):
        value = report.aggregates[key]
        if isinstance(value, float):
            lines.append(f"{key}\t{value:.4f}")
        else:
            lines.append(f"{key}\t{value}")
    if report.bleu_buckets is not None:
        lines.append("bucket\tcount\tmean_mrr")
        for b in report.bleu_buckets:
            lines.append(f"[{b['low']:.1f},{b['high']:.1f}]\t{b['count']}\t{b['mean_mrr']:.4f}")
    return "\n".join(lines)
