"""Pair-corpus tooling: tokenization, vocabularies, splits, batches, negatives.

The exchange format is line-delimited JSON, one object per line with string
fields "code" and "query". Everything downstream works on integer id
sequences wrapped in BOS/EOS.
"""

import json
from collections import Counter
from dataclasses import dataclass

import numpy as np

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")

_CODE_PUNCT = set("(),;=.<>")


class CorpusFormatError(ValueError):
    """A malformed corpus line; carries the 1-based line number."""

    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def tokenize(text, side):
    """Split `text` into tokens.

    Query side: lowercased whitespace split. Code side: whitespace split with
    ( ) , ; = . < > separated into standalone tokens, case preserved.
    """
    if side == "query":
        return text.lower().split()
    if side != "code":
        raise ValueError(f"side must be 'code' or 'query', got {side!r}")
    tokens = []
    for chunk in text.split():
        word = ""
        for ch in chunk:
            if ch in _CODE_PUNCT:
                if word:
                    tokens.append(word)
                    word = ""
                tokens.append(ch)
            else:
                word += ch
        if word:
            tokens.append(word)
    return tokens


@dataclass
class Vocab:
    """Bidirectional token/id map with reserved PAD/UNK/BOS/EOS ids 0..3."""

    token_to_id: dict
    id_to_token: list

    @property
    def size(self):
        return len(self.id_to_token)

    def lookup(self, token):
        return self.token_to_id.get(token, UNK)

    def decode(self, ids, strip_special=True):
        toks = [self.id_to_token[i] for i in ids]
        if strip_special:
            toks = [t for t in toks if t not in RESERVED]
        return toks


def build_vocab(token_lists, min_freq=1, max_size=10000):
    """Frequency-ranked vocabulary, ties broken by first occurrence."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    if max_size <= 4:
        raise ValueError("max_size must exceed the 4 reserved entries")
    counts = Counter()
    first_seen = {}
    pos = 0
    for toks in token_lists:
        for t in toks:
            counts[t] += 1
            if t not in first_seen:
                first_seen[t] = pos
                pos += 1
    kept = [t for t, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda t: (-counts[t], first_seen[t]))
    kept = kept[: max_size - 4]
    id_to_token = list(RESERVED) + kept
    return Vocab({t: i for i, t in enumerate(id_to_token)}, id_to_token)


def encode(vocab, tokens, max_len):
    """BOS + ids (UNK for unknowns) + EOS, truncating tokens to max_len - 2."""
    if max_len < 3:
        raise ValueError("max_len must be >= 3")
    body = [vocab.lookup(t) for t in tokens[: max_len - 2]]
    return [BOS] + body + [EOS]


@dataclass
class PairExample:
    """One <code, query> pair: encoded id sequences plus raw token lists."""

    code_ids: list
    query_ids: list
    raw_code: list
    raw_query: list
    index: int = -1  # position in its owning corpus; identity for negatives


def make_example(vocab_code, vocab_query, code_text, query_text,
                 max_code_len, max_query_len, index=-1):
    raw_code = tokenize(code_text, "code")
    raw_query = tokenize(query_text, "query")
    return PairExample(
        code_ids=encode(vocab_code, raw_code, max_code_len),
        query_ids=encode(vocab_query, raw_query, max_query_len),
        raw_code=raw_code,
        raw_query=raw_query,
        index=index,
    )


def read_pairs(path):
    """Read the line-delimited pair file; empty or malformed lines are errors."""
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(line_no, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise CorpusFormatError(line_no, "record is not an object")
            for key in ("code", "query"):
                if key not in obj:
                    raise CorpusFormatError(line_no, f'missing field "{key}"')
                if not isinstance(obj[key], str):
                    raise CorpusFormatError(line_no, f'field "{key}" is not a string')
            pairs.append({"code": obj["code"], "query": obj["query"]})
    return pairs


def write_pairs(pairs, path):
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps({"code": p["code"], "query": p["query"]}) + "\n")


def save_vocab(vocab, path):
    """One token per line; 4 reserved header lines, then id = line number + 3."""
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab.id_to_token:
            fh.write(tok + "\n")


def load_vocab(path):
    with open(path, "r", encoding="utf-8") as fh:
        id_to_token = [line.rstrip("\n") for line in fh]
    if id_to_token[:4] != list(RESERVED):
        raise ValueError(f"vocab file {path} lacks the reserved 4-line header")
    return Vocab({t: i for i, t in enumerate(id_to_token)}, id_to_token)


def split_corpus(pairs, seed):
    """Seed-deterministic shuffle, then 75/10/15 partition (remainder to train)."""
    order = np.random.default_rng(np.random.SeedSequence([int(seed)])).permutation(
        len(pairs)
    )
    shuffled = [pairs[i] for i in order]
    n = len(pairs)
    n_valid = int(n * 0.10)
    n_test = int(n * 0.15)
    n_train = n - n_valid - n_test
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_valid],
        shuffled[n_train + n_valid :],
    )


@dataclass
class Batch:
    """Padded id matrices with boolean masks (True = real token)."""

    code_matrix: np.ndarray
    query_matrix: np.ndarray
    code_mask: np.ndarray
    query_mask: np.ndarray
    code_lengths: np.ndarray
    query_lengths: np.ndarray
    indices: np.ndarray  # corpus indices of the examples

    @property
    def size(self):
        return self.code_matrix.shape[0]


def _pad_rows(rows, pad_id):
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    width = int(lengths.max())
    mat = np.full((len(rows), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        mat[i, : len(r)] = r
        mask[i, : len(r)] = True
    return mat, mask, lengths


def make_batch(examples, pad_id=PAD):
    if not examples:
        raise ValueError("make_batch requires a non-empty example list")
    code_mat, code_mask, code_len = _pad_rows([e.code_ids for e in examples], pad_id)
    query_mat, query_mask, query_len = _pad_rows(
        [e.query_ids for e in examples], pad_id
    )
    return Batch(
        code_matrix=code_mat,
        query_matrix=query_mat,
        code_mask=code_mask,
        query_mask=query_mask,
        code_lengths=code_len,
        query_lengths=query_len,
        indices=np.array([e.index for e in examples], dtype=np.int64),
    )


def sample_negatives(batch, corpus, rng):
    """Draw one random code row and one random query row per batch example.

    Draws are uniform over `corpus` and re-drawn while they hit the positive's
    own corpus index (content duplicates elsewhere are tolerated). Returns two
    Batches: the negative codes and the negative queries.
    """
    n = len(corpus)
    if n < 2:
        raise ValueError("negative sampling needs a corpus of at least 2 pairs")

    def draw(own_index):
        idx = int(rng.integers(0, n))
        while idx == own_index:
            idx = int(rng.integers(0, n))
        return idx

    code_rows = [corpus[draw(int(i))] for i in batch.indices]
    query_rows = [corpus[draw(int(i))] for i in batch.indices]
    return make_batch(code_rows), make_batch(query_rows)


@dataclass
class CorpusSplits:
    """Encoded train/valid/test partitions plus their shared vocabularies."""

    train: list
    valid: list
    test: list
    vocab_code: Vocab
    vocab_query: Vocab
    max_code_len: int = 120
    max_query_len: int = 200

    @property
    def sizes(self):
        return (len(self.train), len(self.valid), len(self.test))


def prepare_splits(pairs, seed, min_freq=2, max_code_vocab=15000,
                   max_query_vocab=10000, max_code_len=120, max_query_len=200):
    """Split raw pairs, build vocabularies from the training partition only,
    and encode all three partitions."""
    raw_train, raw_valid, raw_test = split_corpus(pairs, seed)
    code_tokens = [tokenize(p["code"], "code") for p in raw_train]
    query_tokens = [tokenize(p["query"], "query") for p in raw_train]
    vocab_code = build_vocab(code_tokens, min_freq=min_freq, max_size=max_code_vocab)
    vocab_query = build_vocab(query_tokens, min_freq=min_freq, max_size=max_query_vocab)

    def encode_all(raw):
        return [
            make_example(
                vocab_code, vocab_query, p["code"], p["query"],
                max_code_len, max_query_len, index=i,
            )
            for i, p in enumerate(raw)
        ]

    return CorpusSplits(
        train=encode_all(raw_train),
        valid=encode_all(raw_valid),
        test=encode_all(raw_test),
        vocab_code=vocab_code,
        vocab_query=vocab_query,
        max_code_len=max_code_len,
        max_query_len=max_query_len,
    )


def batches_of(examples, batch_size, order=None):
    """Yield batches in `order` (an index permutation; default corpus order)."""
    idx = np.arange(len(examples)) if order is None else np.asarray(order)
    for lo in range(0, len(idx), batch_size):
        chunk = [examples[i] for i in idx[lo : lo + batch_size]]
        yield make_batch(chunk)
