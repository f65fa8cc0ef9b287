"""The probabilistic-duality regularizer coupling the two seq2seq tasks.

A perfectly consistent pair of conditional models satisfies
log P(x) + log P(y|x) = log P(y) + log P(x|y); the regularizer is the squared
gap between the two joint log-probabilities. The marginals come from frozen
language models and enter as constants, so gradient flows only through the
two conditionals.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class DualityInputs:
    """One pair's four log-probabilities. Marginals are plain floats
    (constants); conditionals are scalar tensors from the two decoders."""

    log_px: float
    log_py: float
    log_py_given_x: Tensor
    log_px_given_y: Tensor


def dual_regularizer(inputs):
    """Squared gap between the two joint log-probabilities, as a scalar
    tensor differentiable through the conditionals only."""
    for v in (inputs.log_px, inputs.log_py):
        if not math.isfinite(v):
            raise ValueError(f"non-finite marginal log-probability: {v}")
    for t in (inputs.log_py_given_x, inputs.log_px_given_y):
        if not np.isfinite(t.data).all():
            raise ValueError("non-finite conditional log-probability")
    left = ad.add(inputs.log_py_given_x, float(inputs.log_px))
    right = ad.add(inputs.log_px_given_y, float(inputs.log_py))
    return ad.mean_all(ad.squared_difference(left, right))


def dual_gap_loss(log_px, log_py, log_py_given_x, log_px_given_y):
    """Batched regularizer: mean over rows of the squared joint-log gap.

    `log_px`/`log_py` are constant float arrays; the conditionals are (B,)
    tensors.
    """
    log_px = np.asarray(log_px, dtype=float)
    log_py = np.asarray(log_py, dtype=float)
    if not (np.isfinite(log_px).all() and np.isfinite(log_py).all()):
        raise ValueError("non-finite marginal log-probability")
    if not (np.isfinite(log_py_given_x.data).all()
            and np.isfinite(log_px_given_y.data).all()):
        raise ValueError("non-finite conditional log-probability")
    left = ad.add(log_py_given_x, log_px)
    right = ad.add(log_px_given_y, log_py)
    return ad.mean_all(ad.squared_difference(left, right))


def batch_dual_loss(model, lms, batch, length_normalize=False):
    """Mean per-pair regularizer over a batch, running both teacher-forced
    passes. `lms` is the (code LM, query LM) pair."""
    from .lm import batch_log_marginals

    lm_code, lm_query = lms
    log_px = batch_log_marginals(lm_code, batch.code_matrix, batch.code_mask)
    log_py = batch_log_marginals(lm_query, batch.query_matrix, batch.query_mask)
    log_py_given_x = model.teacher_forced_logprob(
        "summarize", batch.code_matrix, batch.code_mask,
        batch.query_matrix, batch.query_mask,
    )
    log_px_given_y = model.teacher_forced_logprob(
        "generate", batch.query_matrix, batch.query_mask,
        batch.code_matrix, batch.code_mask,
    )
    if length_normalize:
        x_tokens = batch.code_mask.sum(axis=1) - 1
        y_tokens = batch.query_mask.sum(axis=1) - 1
        log_px = log_px / x_tokens
        log_py = log_py / y_tokens
        log_py_given_x = ad.mul(log_py_given_x, 1.0 / y_tokens)
        log_px_given_y = ad.mul(log_px_given_y, 1.0 / x_tokens)
    return dual_gap_loss(log_px, log_py, log_py_given_x, log_px_given_y)
