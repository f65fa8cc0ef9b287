"""Per-side autoregressive LSTM language models.

These estimate the marginal log-probability of a sequence as the sum of
next-token log-probabilities. They are pretrained once on a side's corpus,
then frozen: the duality term consumes their outputs as plain constants and
no gradient ever reaches them.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seq2seq import LstmCell, init_cell, lstm_step, gold_logprob


@dataclass
class LanguageModel:
    side: str            # "code" or "query"
    embed: Tensor        # (V, D)
    cell: LstmCell       # hidden H, input D; not part of any shared registry
    W_out: Tensor        # (V, H)
    b_out: Tensor        # (V,)

    @property
    def vocab_size(self):
        return self.embed.shape[0]

    @classmethod
    def build(cls, side, vocab_size, hidden, embed_dim, rng, scale=0.1):
        return cls(
            side=side,
            embed=ad.param(rng.uniform(-scale, scale, size=(vocab_size, embed_dim))),
            cell=init_cell(hidden, embed_dim, rng, scale),
            W_out=ad.param(rng.uniform(-scale, scale, size=(vocab_size, hidden))),
            b_out=ad.param(rng.uniform(-scale, scale, size=(vocab_size,))),
        )

    def named_tensors(self):
        out = {"embed": self.embed}
        for name, t in self.cell.tensors():
            out[f"cell.{name}"] = t
        out["W_out"] = self.W_out
        out["b_out"] = self.b_out
        return out


def _next_token_logprobs(lm, ids, mask):
    """Per-row sum of log P(token | prefix) over unmasked predicted positions.

    `ids` rows are BOS-wrapped; position t+1 is predicted from the state
    after consuming position t.
    """
    ids = np.asarray(ids)
    mask = np.asarray(mask, dtype=bool)
    B, T = ids.shape
    hidden = lm.cell.hidden_size
    h = ad.zeros((B, hidden))
    c = ad.zeros((B, hidden))
    total = ad.zeros((B,))
    for t in range(T - 1):
        x = ad.rows(lm.embed, ids[:, t])
        h_new, c_new = lstm_step(lm.cell, h, c, x)
        col = mask[:, t : t + 1]
        h = ad.masked_where(col, h_new, h)
        c = ad.masked_where(col, c_new, c)
        logits = ad.add(ad.matmul(h, ad.transpose(lm.W_out)), lm.b_out)
        probs = ad.softmax_masked(logits)
        lp = gold_logprob(probs, ids[:, t + 1])
        total = ad.add(total, ad.mul(lp, mask[:, t + 1].astype(lp.data.dtype)))
    return total


def sequence_log_marginal(lm, ids):
    """log P(sequence) for one BOS/EOS-wrapped id list, as a plain float.

    Computed outside any tape: language models are frozen, so marginals are
    constants to everything downstream.
    """
    arr = np.asarray([ids])
    total = _next_token_logprobs(lm, arr, np.ones_like(arr, dtype=bool))
    return float(total.data[0])


def batch_log_marginals(lm, ids, mask):
    """Per-row log-marginals for a padded batch matrix, as a float array."""
    return _next_token_logprobs(lm, ids, mask).data.copy()


def perplexity(lm, sequences):
    """exp of the mean per-token NLL over all predicted tokens of `sequences`."""
    total_lp = 0.0
    total_tokens = 0
    for ids in sequences:
        total_lp += sequence_log_marginal(lm, ids)
        total_tokens += len(ids) - 1  # every token after BOS is predicted
    return float(np.exp(-total_lp / total_tokens))


def pretrain_lm(sequences, side, vocab_size, hidden, embed_dim, epochs, lr,
                rng, batch_size=32, shuffle_rng=None):
    """Train a fresh language model on this side's id sequences with Adam,
    minimizing next-token NLL. Returns the model and the per-epoch mean
    losses; freeze is by convention (nothing ever updates it afterwards)."""
    from .train import AdamOptimizer  # local import to avoid a cycle

    lm = LanguageModel.build(side, vocab_size, hidden, embed_dim, rng)
    opt = AdamOptimizer(lm.named_tensors(), lr=lr)
    history = []
    n = len(sequences)
    for epoch in range(epochs):
        order = (
            shuffle_rng.permutation(n) if shuffle_rng is not None else np.arange(n)
        )
        losses = []
        for lo in range(0, n, batch_size):
            rows = [sequences[i] for i in order[lo : lo + batch_size]]
            width = max(len(r) for r in rows)
            ids = np.zeros((len(rows), width), dtype=np.int64)
            mask = np.zeros_like(ids, dtype=bool)
            for i, r in enumerate(rows):
                ids[i, : len(r)] = r
                mask[i, : len(r)] = True
            for t in lm.named_tensors().values():
                t.zero_grad()
            with ad.Tape() as tape:
                logp = _next_token_logprobs(lm, ids, mask)
                loss = ad.mean_all(ad.mul(logp, -1.0))
            tape.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
    return lm, history
