"""The dual attention seq2seq pair: code->query summarization and
query->code generation, built on two shared LSTM cell pairs.

Each side of the model (code, query) owns one pair of direction cells. The
pair scans as a bidirectional encoder for that side's sequences, and the
*same two cells* advance in parallel over the two halves of the decoder
state when the pair serves as the other task's decoder. The decoder state is
therefore exactly the concatenated encoder width, `h_0 = [fwd_final;
bwd_first]` lands each half in its own cell's state space, and encoder and
decoder genuinely share every cell parameter. A learned affine pre-projection
maps the decoder's [prev embedding; context] input down to the cells' input
width.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS, EOS
from .retrieval import RetrievalParams

NLL_FLOOR = 1e-12

_GATES = ("i", "f", "o", "g")


class UnderflowCounter:
    """Counts teacher-forcing steps where a gold probability hit the floor."""

    def __init__(self):
        self.count = 0


underflow_warnings = UnderflowCounter()


@dataclass
class LstmCell:
    """One LSTM cell: recurrent (H,H), input (H,D) matrices and (H,) biases
    for the input/forget/output/candidate gates."""

    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    W_g: Tensor
    U_i: Tensor
    U_f: Tensor
    U_o: Tensor
    U_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    @property
    def hidden_size(self):
        return self.W_i.shape[0]

    @property
    def input_size(self):
        return self.U_i.shape[1]

    def tensors(self):
        for gate in _GATES:
            yield f"W_{gate}", getattr(self, f"W_{gate}")
        for gate in _GATES:
            yield f"U_{gate}", getattr(self, f"U_{gate}")
        for gate in _GATES:
            yield f"b_{gate}", getattr(self, f"b_{gate}")

    def parameter_count(self):
        return sum(t.data.size for _, t in self.tensors())


def init_cell(hidden, inputs, rng, scale=0.1):
    def mat(r, c):
        return ad.param(rng.uniform(-scale, scale, size=(r, c)))

    def vec(r):
        return ad.param(rng.uniform(-scale, scale, size=(r,)))

    return LstmCell(
        W_i=mat(hidden, hidden), W_f=mat(hidden, hidden),
        W_o=mat(hidden, hidden), W_g=mat(hidden, hidden),
        U_i=mat(hidden, inputs), U_f=mat(hidden, inputs),
        U_o=mat(hidden, inputs), U_g=mat(hidden, inputs),
        b_i=vec(hidden), b_f=vec(hidden), b_o=vec(hidden), b_g=vec(hidden),
    )


def lstm_step(cell, h_prev, c_prev, x):
    """One gated update: returns (h, c) for a batch of rows."""
    if x.shape[1] != cell.input_size or h_prev.shape[1] != cell.hidden_size:
        raise ad.ShapeMismatchError(
            f"lstm_step: input {x.shape} / state {h_prev.shape} do not match "
            f"cell (H={cell.hidden_size}, D={cell.input_size})"
        )

    def gate(W, U, b, squash):
        pre = ad.add(
            ad.add(ad.matmul(h_prev, ad.transpose(W)), ad.matmul(x, ad.transpose(U))),
            b,
        )
        return squash(pre)

    i = gate(cell.W_i, cell.U_i, cell.b_i, ad.sigmoid)
    f = gate(cell.W_f, cell.U_f, cell.b_f, ad.sigmoid)
    o = gate(cell.W_o, cell.U_o, cell.b_o, ad.sigmoid)
    g = gate(cell.W_g, cell.U_g, cell.b_g, ad.tanh)
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


@dataclass
class CellPair:
    """A side's two direction cells: one logical LSTM instance.

    Scans forward/backward as a bidirectional encoder; advances both cells in
    parallel over the split state halves as a decoder.
    """

    fwd: LstmCell
    bwd: LstmCell

    @property
    def state_size(self):
        return 2 * self.fwd.hidden_size

    def tensors(self):
        for dirn in ("fwd", "bwd"):
            for name, t in getattr(self, dirn).tensors():
                yield f"{dirn}.{name}", t

    def parameter_count(self):
        return self.fwd.parameter_count() + self.bwd.parameter_count()


ROLES = ("code_encoder", "code_decoder", "query_encoder", "query_decoder")


class SharedCellRegistry:
    """Maps module roles to cell pairs and records which roles alias which.

    Shared mode keeps one entry per language side, so the code encoder and
    code decoder resolve to the same pair object (likewise for query). The
    unshared ablation gives every role its own entry.
    """

    def __init__(self, entries, roles):
        self.entries = entries  # name -> CellPair
        self.roles = roles      # role -> entry name
        for role in ROLES:
            if role not in roles:
                raise ValueError(f"registry is missing role {role!r}")

    @classmethod
    def build(cls, hidden, embed_dim, rng, shared=True, scale=0.1):
        if hidden % 2:
            raise ValueError("hidden size must be even (two direction cells)")
        half = hidden // 2

        def pair():
            return CellPair(
                fwd=init_cell(half, embed_dim, rng, scale),
                bwd=init_cell(half, embed_dim, rng, scale),
            )

        if shared:
            entries = {"code": pair(), "query": pair()}
            roles = {
                "code_encoder": "code", "code_decoder": "code",
                "query_encoder": "query", "query_decoder": "query",
            }
        else:
            entries = {role: pair() for role in ROLES}
            roles = {role: role for role in ROLES}
        return cls(entries, roles)

    def pair_for(self, role):
        return self.entries[self.roles[role]]

    @property
    def bundle_count(self):
        return len(self.entries)

    @property
    def shared(self):
        return self.roles["code_encoder"] == self.roles["code_decoder"]

    def cell_parameter_count(self):
        return sum(pair.parameter_count() for pair in self.entries.values())

    def tensors(self):
        for name, pair in self.entries.items():
            for sub, t in pair.tensors():
                yield f"cells.{name}.{sub}", t


@dataclass
class AttentionDecoderHead:
    """Task-specific decoder parameters: bilinear attention, input
    pre-projection, and the two-layer vocabulary projection."""

    W_bi: Tensor   # (H_dec, H_enc) bilinear attention
    W_pp: Tensor   # (D, D + H) decoder input pre-projection
    b_pp: Tensor
    W_u: Tensor    # (H, 2H) combines [state; context]
    b_u: Tensor
    W_v: Tensor    # (V, H) vocabulary logits
    b_v: Tensor

    def tensors(self):
        for name in ("W_bi", "W_pp", "b_pp", "W_u", "b_u", "W_v", "b_v"):
            yield name, getattr(self, name)


def init_head(hidden, embed_dim, vocab_size, rng, scale=0.1):
    def mat(r, c):
        return ad.param(rng.uniform(-scale, scale, size=(r, c)))

    def vec(r):
        return ad.param(rng.uniform(-scale, scale, size=(r,)))

    return AttentionDecoderHead(
        W_bi=mat(hidden, hidden),
        W_pp=mat(embed_dim, embed_dim + hidden), b_pp=vec(embed_dim),
        W_u=mat(hidden, 2 * hidden), b_u=vec(hidden),
        W_v=mat(vocab_size, hidden), b_v=vec(vocab_size),
    )


@dataclass
class EncoderRun:
    """Bidirectional encoder output: per-step concatenated states (zeroed at
    padding), the forward cell's state at each row's last real token, and the
    backward cell's state at the first token."""

    states: Tensor       # (B, T, H)
    mask: np.ndarray     # (B, T)
    fwd_final: Tensor    # (B, H/2)
    bwd_first: Tensor    # (B, H/2)


def encode_bidirectional(pair, embed_table, ids, mask):
    ids = np.asarray(ids)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ValueError("encode_bidirectional: a row has no unmasked positions")
    B, T = ids.shape
    half = pair.fwd.hidden_size

    def scan(cell, time_order):
        h = ad.zeros((B, half))
        c = ad.zeros((B, half))
        outs = {}
        for t in time_order:
            x = ad.rows(embed_table, ids[:, t])
            h_new, c_new = lstm_step(cell, h, c, x)
            col = mask[:, t : t + 1]
            h = ad.masked_where(col, h_new, h)
            c = ad.masked_where(col, c_new, c)
            outs[t] = ad.mul(h, col.astype(h.data.dtype))
        return h, outs

    fwd_final, fwd_outs = scan(pair.fwd, range(T))
    bwd_first, bwd_outs = scan(pair.bwd, range(T - 1, -1, -1))
    per_step = [ad.concat([fwd_outs[t], bwd_outs[t]], axis=1) for t in range(T)]
    states = ad.stack(per_step, axis=1)
    return EncoderRun(states=states, mask=mask, fwd_final=fwd_final, bwd_first=bwd_first)


def attention(enc_states, enc_mask, dec_state, W_bi):
    """Bilinear attention: weights over unmasked encoder steps and the
    weighted context vector."""
    query = ad.matmul(dec_state, W_bi)
    scores = ad.bdot(enc_states, query)
    weights = ad.softmax_masked(scores, enc_mask)
    context = ad.bweight(enc_states, weights)
    return weights, context


@dataclass
class DecoderState:
    h_fwd: Tensor
    c_fwd: Tensor
    h_bwd: Tensor
    c_bwd: Tensor
    context: Tensor

    @property
    def state(self):
        return ad.concat([self.h_fwd, self.h_bwd], axis=1)


def init_decoder(enc):
    """Start the decoder from [fwd final; bwd first] with zeroed memory cells
    and a zero context vector."""
    B = enc.fwd_final.shape[0]
    half = enc.fwd_final.shape[1]
    return DecoderState(
        h_fwd=enc.fwd_final,
        c_fwd=ad.zeros((B, half)),
        h_bwd=enc.bwd_first,
        c_bwd=ad.zeros((B, half)),
        context=ad.zeros((B, 2 * half)),
    )


def decode_step(pair, head, embed_tgt, state, prev_ids, enc):
    """One decoder step: pre-project [prev embedding; context], advance both
    direction cells on the state halves, attend, and project to a vocabulary
    distribution."""
    emb = ad.rows(embed_tgt, np.asarray(prev_ids))
    x_in = ad.concat([emb, state.context], axis=1)
    x = ad.add(ad.matmul(x_in, ad.transpose(head.W_pp)), head.b_pp)
    h_f, c_f = lstm_step(pair.fwd, state.h_fwd, state.c_fwd, x)
    h_b, c_b = lstm_step(pair.bwd, state.h_bwd, state.c_bwd, x)
    h_d = ad.concat([h_f, h_b], axis=1)
    weights, context = attention(enc.states, enc.mask, h_d, head.W_bi)
    u = ad.add(ad.matmul(ad.concat([h_d, context], axis=1), ad.transpose(head.W_u)), head.b_u)
    logits = ad.add(ad.matmul(u, ad.transpose(head.W_v)), head.b_v)
    probs = ad.softmax_masked(logits)
    new_state = DecoderState(h_fwd=h_f, c_fwd=c_f, h_bwd=h_b, c_bwd=c_b, context=context)
    return new_state, weights, probs


def gold_logprob(probs, gold_ids):
    """log P at the gold ids, floored at NLL_FLOOR (counted when it bites)."""
    picked = ad.pick(probs, gold_ids)
    hits = int((picked.data < NLL_FLOOR).sum())
    if hits:
        underflow_warnings.count += hits
    return ad.log(ad.clamp_min(picked, NLL_FLOOR))


def nll_loss(step_distributions, target_ids, target_mask):
    """Teacher-forcing loss: per-row sum of -log P at gold tokens over
    unmasked positions, averaged over rows. `step_distributions[t]` predicts
    `target_ids[:, t + 1]`."""
    target_ids = np.asarray(target_ids)
    target_mask = np.asarray(target_mask, dtype=bool)
    B = target_ids.shape[0]
    total = ad.zeros((B,))
    for t, probs in enumerate(step_distributions):
        lp = gold_logprob(probs, target_ids[:, t + 1])
        total = ad.add(total, ad.mul(lp, target_mask[:, t + 1].astype(lp.data.dtype)))
    return ad.mean_all(ad.mul(total, -1.0))


class Co3Model:
    """The full trainable parameter set plus its forward passes.

    Built from a shared-cell registry, two embedding tables, the per-task
    decoder heads (either may be absent in ablation variants), and the
    retrieval projections.
    """

    def __init__(self, hidden, embed_dim, registry, embed_code, embed_query,
                 summarizer, generator, retrieval):
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.registry = registry
        self.embed_code = embed_code
        self.embed_query = embed_query
        self.summarizer = summarizer
        self.generator = generator
        self.retrieval = retrieval

    # -- construction ------------------------------------------------------

    @classmethod
    def build(cls, hidden, embed_dim, proj_dim, vocab_code_size, vocab_query_size,
              rng, shared=True, with_summarizer=True, with_generator=True,
              scale=0.1):
        registry = SharedCellRegistry.build(hidden, embed_dim, rng, shared=shared,
                                            scale=scale)
        embed_code = ad.param(rng.uniform(-scale, scale, size=(vocab_code_size, embed_dim)))
        embed_query = ad.param(rng.uniform(-scale, scale, size=(vocab_query_size, embed_dim)))
        summarizer = (
            init_head(hidden, embed_dim, vocab_query_size, rng, scale)
            if with_summarizer else None
        )
        generator = (
            init_head(hidden, embed_dim, vocab_code_size, rng, scale)
            if with_generator else None
        )
        retrieval = RetrievalParams.build(hidden, proj_dim, rng, scale)
        return cls(hidden, embed_dim, registry, embed_code, embed_query,
                   summarizer, generator, retrieval)

    # -- parameter bookkeeping --------------------------------------------

    def named_tensors(self):
        out = {}
        for name, t in self.registry.tensors():
            out[name] = t
        out["embed.code"] = self.embed_code
        out["embed.query"] = self.embed_query
        for head, label in ((self.summarizer, "summarize"), (self.generator, "generate")):
            if head is not None:
                for name, t in head.tensors():
                    out[f"head.{label}.{name}"] = t
        for name, t in self.retrieval.tensors():
            out[f"retrieval.{name}"] = t
        return out

    def parameter_count(self):
        return sum(t.data.size for t in self.named_tensors().values())

    def _role_tensors(self, role):
        entry = self.registry.roles[role]
        return {
            f"cells.{entry}.{sub}": t
            for sub, t in self.registry.entries[entry].tensors()
        }

    def summarization_tensors(self):
        """Everything the code->query task trains: its encoder and decoder
        cells, both embeddings, and its head."""
        out = {}
        out.update(self._role_tensors("code_encoder"))
        out.update(self._role_tensors("query_decoder"))
        out["embed.code"] = self.embed_code
        out["embed.query"] = self.embed_query
        for name, t in self.summarizer.tensors():
            out[f"head.summarize.{name}"] = t
        return out

    def generation_tensors(self):
        out = {}
        out.update(self._role_tensors("query_encoder"))
        out.update(self._role_tensors("code_decoder"))
        out["embed.code"] = self.embed_code
        out["embed.query"] = self.embed_query
        for name, t in self.generator.tensors():
            out[f"head.generate.{name}"] = t
        return out

    def retrieval_tensors(self):
        """The retrieval projections plus every encoder tensor its loss can
        reach (both side's encoder cells and embeddings)."""
        out = {}
        out.update(self._role_tensors("code_encoder"))
        out.update(self._role_tensors("query_encoder"))
        out["embed.code"] = self.embed_code
        out["embed.query"] = self.embed_query
        for name, t in self.retrieval.tensors():
            out[f"retrieval.{name}"] = t
        return out

    def zero_grads(self):
        for t in self.named_tensors().values():
            t.zero_grad()

    # -- forward passes ----------------------------------------------------

    def _route(self, direction):
        if direction == "summarize":
            if self.summarizer is None:
                raise ValueError("this variant has no summarization head")
            return ("code_encoder", "query_decoder", self.embed_code,
                    self.embed_query, self.summarizer)
        if direction == "generate":
            if self.generator is None:
                raise ValueError("this variant has no generation head")
            return ("query_encoder", "code_decoder", self.embed_query,
                    self.embed_code, self.generator)
        raise ValueError(f"unknown direction {direction!r}")

    def encode_code(self, ids, mask):
        return encode_bidirectional(
            self.registry.pair_for("code_encoder"), self.embed_code, ids, mask
        )

    def encode_query(self, ids, mask):
        return encode_bidirectional(
            self.registry.pair_for("query_encoder"), self.embed_query, ids, mask
        )

    def teacher_forced_logprob(self, direction, src_ids, src_mask, tgt_ids, tgt_mask):
        """Per-row conditional log-probability of the gold targets (BOS never
        predicted, EOS included), as a differentiable (B,) tensor."""
        enc_role, dec_role, embed_src, embed_tgt, head = self._route(direction)
        enc = encode_bidirectional(
            self.registry.pair_for(enc_role), embed_src, src_ids, src_mask
        )
        state = init_decoder(enc)
        tgt_ids = np.asarray(tgt_ids)
        tgt_mask = np.asarray(tgt_mask, dtype=bool)
        B, T = tgt_ids.shape
        dec_pair = self.registry.pair_for(dec_role)
        total = ad.zeros((B,))
        for t in range(T - 1):
            state, _, probs = decode_step(dec_pair, head, embed_tgt, state,
                                          tgt_ids[:, t], enc)
            lp = gold_logprob(probs, tgt_ids[:, t + 1])
            total = ad.add(total, ad.mul(lp, tgt_mask[:, t + 1].astype(lp.data.dtype)))
        return total

    def nll(self, direction, src_ids, src_mask, tgt_ids, tgt_mask):
        logp = self.teacher_forced_logprob(direction, src_ids, src_mask,
                                           tgt_ids, tgt_mask)
        return ad.mean_all(ad.mul(logp, -1.0))

    def conditional_logprob(self, direction, src_ids, tgt_ids):
        """Scalar log P(target | source) for one pair of wrapped id lists."""
        src = np.asarray([src_ids])
        tgt = np.asarray([tgt_ids])
        logp = self.teacher_forced_logprob(
            direction, src, np.ones_like(src, dtype=bool),
            tgt, np.ones_like(tgt, dtype=bool),
        )
        return ad.mean_all(logp)

    def greedy_decode(self, direction, src_ids, max_len):
        """Greedy decoding from BOS; returns generated content ids (no
        BOS/EOS), at most max_len of them."""
        enc_role, dec_role, embed_src, embed_tgt, head = self._route(direction)
        src = np.asarray([src_ids])
        enc = encode_bidirectional(
            self.registry.pair_for(enc_role), embed_src, src,
            np.ones_like(src, dtype=bool),
        )
        state = init_decoder(enc)
        dec_pair = self.registry.pair_for(dec_role)
        prev = BOS
        out = []
        for _ in range(max_len):
            state, _, probs = decode_step(dec_pair, head, embed_tgt, state,
                                          [prev], enc)
            nxt = int(np.argmax(probs.data[0]))
            if nxt == EOS:
                break
            out.append(nxt)
            prev = nxt
        return out

    def beam_decode(self, direction, src_ids, max_len, beam=1):
        """Beam search over prefixes by total log-probability; the final pick
        is length-normalized. beam=1 reproduces greedy decoding."""
        if beam < 1:
            raise ValueError("beam must be >= 1")
        enc_role, dec_role, embed_src, embed_tgt, head = self._route(direction)
        src = np.asarray([src_ids])
        enc = encode_bidirectional(
            self.registry.pair_for(enc_role), embed_src, src,
            np.ones_like(src, dtype=bool),
        )
        dec_pair = self.registry.pair_for(dec_role)
        live = [(init_decoder(enc), (), 0.0)]  # (state, content ids, logp)
        done = []
        for _ in range(max_len):
            grown = []
            for state, ids, logp in live:
                prev = ids[-1] if ids else BOS
                new_state, _, probs = decode_step(dec_pair, head, embed_tgt,
                                                  state, [prev], enc)
                lp = np.log(np.maximum(probs.data[0], NLL_FLOOR))
                order = np.argsort(-lp, kind="stable")[:beam]
                for tok in order:
                    tok = int(tok)
                    if tok == EOS:
                        done.append((ids, logp + lp[tok]))
                    else:
                        grown.append((new_state, ids + (tok,), logp + lp[tok]))
            if not grown:
                break
            grown.sort(key=lambda b: -b[2])
            live = grown[:beam]
        for _, ids, logp in live:
            done.append((ids, logp))

        def normalized(entry):
            ids, logp = entry
            return logp / (len(ids) + 1)  # +1 for the EOS step

        best = max(done, key=normalized)
        return list(best[0])

    # -- retrieval-facing encodings ----------------------------------------

    def pooled_code(self, ids, mask):
        from .retrieval import pool_states

        return pool_states(self.encode_code(ids, mask))

    def pooled_query(self, ids, mask):
        from .retrieval import pool_states

        return pool_states(self.encode_query(ids, mask))
