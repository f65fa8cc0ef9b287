"""Ranking and text-overlap metrics: MRR, NDCG, corpus BLEU-4, METEOR, and a
paired bootstrap for MRR deltas.

BLEU is the corpus-level geometric mean of modified 1..4-gram precisions
with a brevity penalty; any order whose matched count is zero is smoothed to
1/(2 * candidate n-gram count), counting at least one candidate n-gram.
METEOR is the original exact-match form (no stemming or synonyms): unigram
alignment maximizing matches then minimizing chunks, recall-weighted
harmonic mean, and the cubed fragmentation penalty.
"""

import math
from collections import Counter

import numpy as np


def mrr(gold_ranks):
    """Mean reciprocal rank; ranks are 1-based."""
    ranks = list(gold_ranks)
    if not ranks:
        raise ValueError("mrr of an empty rank list")
    if min(ranks) < 1:
        raise ValueError("ranks must be >= 1")
    return float(np.mean([1.0 / r for r in ranks]))


def ndcg(gold_ranks):
    """Mean NDCG with one binary-relevant item per query: 1/log2(rank + 1)."""
    ranks = list(gold_ranks)
    if not ranks:
        raise ValueError("ndcg of an empty rank list")
    if min(ranks) < 1:
        raise ValueError("ranks must be >= 1")
    return float(np.mean([1.0 / math.log2(r + 1) for r in ranks]))


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates, references):
    """Corpus BLEU with n = 1..4. Candidate/reference lists are aligned token
    lists; an all-empty candidate corpus scores 0 through the brevity
    penalty."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    matched = [0] * 5
    total = [0] * 5
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, 5):
            c = _ngram_counts(cand, n)
            r = _ngram_counts(ref, n)
            total[n] += sum(c.values())
            matched[n] += sum(min(count, r[g]) for g, count in c.items())
    log_sum = 0.0
    for n in range(1, 5):
        if matched[n] > 0:
            p = matched[n] / total[n]
        else:
            p = 1.0 / (2.0 * max(total[n], 1))
        log_sum += math.log(p)
    if cand_len == 0:
        return 0.0
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return float(bp * math.exp(log_sum / 4.0))


def sentence_bleu(candidate, reference):
    return bleu4([candidate], [reference])


def _count_chunks(matches):
    """Chunks of an alignment given (cand_pos, ref_pos) pairs sorted by
    cand_pos: runs contiguous in both sequences."""
    chunks = 0
    prev = None
    for i, j in matches:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def _greedy_alignment(candidate, reference):
    """Leftmost maximum alignment (fallback/bound for the exact search)."""
    used = [False] * len(reference)
    matches = []
    for i, tok in enumerate(candidate):
        for j, ref_tok in enumerate(reference):
            if not used[j] and ref_tok == tok:
                used[j] = True
                matches.append((i, j))
                break
    return matches


def _min_chunks(candidate, reference, m_max, node_cap=200_000):
    """Minimum chunk count over all maximum exact-match alignments.

    Backtracking over candidate positions with a capacity bound; deterministic.
    Falls back to the best alignment found if the search hits `node_cap`
    (only reachable with pathologically repetitive inputs).
    """
    ref_positions = {}
    for j, tok in enumerate(reference):
        ref_positions.setdefault(tok, []).append(j)
    cand_counts = Counter(candidate)
    ref_counts = Counter(reference)

    greedy = _greedy_alignment(candidate, reference)
    best = _count_chunks(sorted(greedy))
    nodes = 0

    def capacity(i, ref_remaining):
        # max further matches from candidate position i on
        remaining = Counter(candidate[i:])
        return sum(min(c, ref_remaining[w]) for w, c in remaining.items())

    def recurse(i, matched, chunks, last, used, ref_remaining):
        nonlocal best, nodes
        nodes += 1
        if nodes > node_cap:
            return
        if chunks >= best:
            return
        if matched == m_max:
            best = min(best, chunks)
            return
        if i >= len(candidate):
            return
        if matched + capacity(i, ref_remaining) < m_max:
            return
        tok = candidate[i]
        for j in ref_positions.get(tok, ()):
            if used[j]:
                continue
            extends = last is not None and last == (i - 1, j - 1)
            used[j] = True
            ref_remaining[tok] -= 1
            recurse(i + 1, matched + 1, chunks + (0 if extends else 1),
                    (i, j), used, ref_remaining)
            ref_remaining[tok] += 1
            used[j] = False
        # skipping position i must still allow a maximum matching
        skip_capacity = capacity(i + 1, ref_remaining)
        if matched + skip_capacity >= m_max:
            recurse(i + 1, matched, chunks, last, used, ref_remaining)

    recurse(0, 0, 0, None, [False] * len(reference), Counter(ref_counts))
    return best


def meteor(candidate, reference):
    """Exact-match METEOR: F = 10PR/(R + 9P), penalty 0.5*(chunks/m)^3."""
    candidate = list(candidate)
    reference = list(reference)
    if not candidate or not reference:
        return 0.0
    m = sum((Counter(candidate) & Counter(reference)).values())
    if m == 0:
        return 0.0
    chunks = _min_chunks(candidate, reference, m)
    precision = m / len(candidate)
    recall = m / len(reference)
    fmean = 10.0 * precision * recall / (recall + 9.0 * precision)
    penalty = 0.5 * (chunks / m) ** 3
    return float(fmean * (1.0 - penalty))


def paired_bootstrap_mrr(ranks_a, ranks_b, n_resamples=10_000, seed=0):
    """Paired bootstrap over per-query reciprocal ranks.

    Returns the observed MRR delta (a - b) and the fraction of resamples
    where the delta is <= 0 (small values favor system a).
    """
    ra = np.asarray([1.0 / r for r in ranks_a])
    rb = np.asarray([1.0 / r for r in ranks_b])
    if ra.shape != rb.shape or ra.size == 0:
        raise ValueError("paired bootstrap needs equal-length nonempty rank lists")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, ra.size, size=(n_resamples, ra.size))
    deltas = ra[idx].mean(axis=1) - rb[idx].mean(axis=1)
    return {
        "delta": float(ra.mean() - rb.mean()),
        "p_value": float((deltas <= 0).mean()),
    }
