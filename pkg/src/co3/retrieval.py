"""Retrieval scoring over pooled encoder states: tanh of a masked
max-over-time pool, affine projections, cosine similarity, and the hinge
ranking loss."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ZeroNormCounter:
    """Counts scores where a projected vector had zero norm (scored as 0)."""

    def __init__(self):
        self.count = 0


zero_norm_warnings = ZeroNormCounter()


@dataclass
class RetrievalParams:
    """Affine maps taking pooled code/query vectors into the shared scoring
    space."""

    W_p: Tensor
    b_p: Tensor
    W_q: Tensor
    b_q: Tensor

    @classmethod
    def build(cls, pooled_dim, proj_dim, rng, scale=0.1):
        def mat(r, c):
            return ad.param(rng.uniform(-scale, scale, size=(r, c)))

        def vec(r):
            return ad.param(rng.uniform(-scale, scale, size=(r,)))

        return cls(
            W_p=mat(proj_dim, pooled_dim), b_p=vec(proj_dim),
            W_q=mat(proj_dim, pooled_dim), b_q=vec(proj_dim),
        )

    def tensors(self):
        for name in ("W_p", "b_p", "W_q", "b_q"):
            yield name, getattr(self, name)


@dataclass
class PooledVector:
    """tanh(max-over-time) of encoder states plus, per coordinate, the time
    index that won the max (for attribution)."""

    vector: Tensor        # (B, H)
    argmax: np.ndarray    # (B, H) time indices


def pool_states(enc):
    """Pool an EncoderRun (or anything with .states and .mask) into one
    vector per row. Masked positions never win a coordinate."""
    pooled, argmax = ad.max_over_time(enc.states, enc.mask)
    return PooledVector(vector=ad.tanh(pooled), argmax=argmax)


def score(code_pooled, query_pooled, params):
    """Cosine similarity of the projected pooled vectors, one per row.

    Rows where either projection has zero norm score exactly 0 (counted in
    `zero_norm_warnings`).
    """
    p = ad.add(ad.matmul(code_pooled, ad.transpose(params.W_p)), params.b_p)
    q = ad.add(ad.matmul(query_pooled, ad.transpose(params.W_q)), params.b_q)
    dead = int(
        ((np.linalg.norm(p.data, axis=1) == 0) | (np.linalg.norm(q.data, axis=1) == 0)).sum()
    )
    if dead:
        zero_norm_warnings.count += dead
    return ad.cosine(p, q)


def ranking_loss(pos_scores, neg_scores, margin):
    """Hinge pushing each positive above its negative by `margin`; mean over
    rows. Subgradient at the hinge point is 0."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    hinge = ad.relu(ad.add(ad.sub(neg_scores, pos_scores), float(margin)))
    return ad.mean_all(hinge)


@dataclass
class ScoredCandidate:
    candidate_id: int
    score: float
    rank: int


def rank_candidates(query_ids, candidate_code_ids, model, params=None):
    """Score one query against an explicit candidate list and rank them.

    Sort is by descending score with ties broken by input order. Returns
    ScoredCandidates in input order (each carrying its 1-based rank).
    """
    if not candidate_code_ids:
        raise ValueError("rank_candidates needs at least one candidate")
    params = params or model.retrieval
    q = np.asarray([query_ids])
    q_pooled = model.pooled_query(q, np.ones_like(q, dtype=bool))

    widths = [len(c) for c in candidate_code_ids]
    T = max(widths)
    mat = np.zeros((len(candidate_code_ids), T), dtype=np.int64)
    mask = np.zeros_like(mat, dtype=bool)
    for i, ids in enumerate(candidate_code_ids):
        mat[i, : len(ids)] = ids
        mask[i, : len(ids)] = True
    c_pooled = model.pooled_code(mat, mask)

    q_rep = Tensor(np.repeat(q_pooled.vector.data, len(candidate_code_ids), axis=0))
    scores = score(c_pooled.vector, q_rep, params).data

    order = np.argsort(-scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.int64)
    ranks[order] = np.arange(1, len(scores) + 1)
    return [
        ScoredCandidate(candidate_id=i, score=float(scores[i]), rank=int(ranks[i]))
        for i in range(len(scores))
    ]


def pooling_attribution(ids, model, side="code"):
    """Per-position counts of how often each token won the max pool.

    Counts sum to the pooled width. `ids` is one wrapped id sequence.
    """
    arr = np.asarray([ids])
    mask = np.ones_like(arr, dtype=bool)
    pooled = model.pooled_code(arr, mask) if side == "code" else model.pooled_query(arr, mask)
    counts = np.bincount(pooled.argmax[0], minlength=arr.shape[1])
    return counts.tolist()
