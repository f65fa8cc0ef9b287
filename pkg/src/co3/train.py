"""Joint training: per-batch sequential updates of the summarization,
generation, and retrieval objectives, with variant configuration,
checkpointing, and validation-based model selection.

Each batch takes three sub-updates in order: (1) summarization loss plus its
weighted duality term updates the summarization parameters; (2) generation
loss plus its weighted duality term, recomputed on the just-updated
parameters, updates the generation parameters; (3) the ranking loss on
freshly sampled negatives updates the retrieval projections and whatever
encoder tensors it reaches. Each sub-update has its own Adam state, so
shared tensors carry one moment pair per objective that trains them.
"""

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .corpus import batches_of, sample_negatives
from .dual import dual_gap_loss
from .lm import batch_log_marginals
from .retrieval import ranking_loss, score
from .seeding import stream
from .seq2seq import Co3Model

CHECKPOINT_MAGIC = b"CO3K"
CHECKPOINT_VERSION = 1

VARIANTS = {
    "CO3": dict(shared=True, summarizer=True, generator=True, dual=True),
    "no_dual_shared": dict(shared=True, summarizer=True, generator=True, dual=False),
    "no_dual_unshared": dict(shared=False, summarizer=True, generator=True, dual=False),
    "no_codegen": dict(shared=True, summarizer=True, generator=False, dual=False),
    "retrieval_only": dict(shared=True, summarizer=False, generator=False, dual=False),
}


def loss_terms(variant):
    """The loss names a variant's definition includes, in reporting order."""
    flags = VARIANTS[variant]
    terms = []
    if flags["summarizer"]:
        terms.append("L_cs")
    if flags["generator"]:
        terms.append("L_cg")
    terms.append("L_cr")
    if flags["dual"]:
        terms.append("L_dual")
    return terms


class ConfigError(ValueError):
    """Bad training configuration or config file."""


class CheckpointError(ValueError):
    """Unreadable, corrupted, or incompatible checkpoint."""


@dataclass
class TrainConfig:
    variant: str = "CO3"
    lambda_cs: float = 0.01
    lambda_cg: float = 0.01
    lr: float = 0.001
    batch_size: int = 32
    max_epochs: int = 10
    margin: float = 0.05
    seed: int = 0
    hidden: int = 400
    embed_dim: int = 200
    proj_dim: int = 400
    max_code_len: int = 120
    max_query_len: int = 200
    negative_mode: str = "random_pair"
    patience: int = 3
    lm_epochs: int = 5
    lm_hidden: int = 0       # 0 falls back to hidden
    lm_embed_dim: int = 0    # 0 falls back to embed_dim
    length_normalized_dual: bool = False
    val_n_distractors: int = 49

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.lambda_cs < 0 or self.lambda_cg < 0:
            raise ConfigError("lambda weights must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.hidden % 2:
            raise ConfigError("hidden must be even")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if self.negative_mode not in ("random_pair", "mismatched_code"):
            raise ConfigError(f"unknown negative_mode {self.negative_mode!r}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        return self


def config_to_text(config):
    lines = []
    for f in dataclasses.fields(TrainConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def config_from_text(text, base=None):
    """Parse flat key=value lines; unknown keys are rejected."""
    config = dataclasses.replace(base) if base else TrainConfig()
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {line_no}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in fields:
            raise ConfigError(f"config line {line_no}: unknown key {key!r}")
        ftype = fields[key].type
        try:
            if ftype in (bool, "bool"):
                if value.lower() not in ("true", "false"):
                    raise ValueError(value)
                parsed = value.lower() == "true"
            elif ftype in (int, "int"):
                parsed = int(value)
            elif ftype in (float, "float"):
                parsed = float(value)
            else:
                parsed = value
        except ValueError as exc:
            raise ConfigError(
                f"config line {line_no}: bad value {value!r} for {key}"
            ) from exc
        setattr(config, key, parsed)
    return config.validate()


def load_config(path, base=None):
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_text(fh.read(), base=base)


def build_model(config, vocab_code_size, vocab_query_size, rng=None):
    flags = VARIANTS[config.variant]
    rng = rng if rng is not None else stream(config.seed, "init")
    return Co3Model.build(
        hidden=config.hidden,
        embed_dim=config.embed_dim,
        proj_dim=config.proj_dim,
        vocab_code_size=vocab_code_size,
        vocab_query_size=vocab_query_size,
        rng=rng,
        shared=flags["shared"],
        with_summarizer=flags["summarizer"],
        with_generator=flags["generator"],
    )


# ---------------------------------------------------------------------------
# Adam


class AdamOptimizer:
    """Standard Adam with bias-corrected moments over a named tensor dict."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / b1c
            v_hat = self.v[name] / b2c
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self, prefix):
        out = {}
        for name in self.params:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, prefix, arrays, t):
        self.t = int(t)
        for name in self.params:
            self.m[name] = arrays[f"{prefix}.m.{name}"].copy()
            self.v[name] = arrays[f"{prefix}.v.{name}"].copy()


def build_optimizers(model, config):
    flags = VARIANTS[config.variant]
    opts = {}
    if flags["summarizer"]:
        opts["cs"] = AdamOptimizer(model.summarization_tensors(), lr=config.lr)
    if flags["generator"]:
        opts["cg"] = AdamOptimizer(model.generation_tensors(), lr=config.lr)
    opts["cr"] = AdamOptimizer(model.retrieval_tensors(), lr=config.lr)
    return opts


# ---------------------------------------------------------------------------
# One batch of Algorithm-style sequential updates


def _batch_marginals(batch, lms, cache):
    """Constant per-row log-marginals, cached by corpus index (LMs are
    frozen, so these never change across epochs)."""
    lm_code, lm_query = lms
    missing = [k for k, idx in enumerate(batch.indices) if int(idx) not in cache]
    if missing:
        px = batch_log_marginals(
            lm_code, batch.code_matrix[missing], batch.code_mask[missing]
        )
        py = batch_log_marginals(
            lm_query, batch.query_matrix[missing], batch.query_mask[missing]
        )
        for pos, k in enumerate(missing):
            cache[int(batch.indices[k])] = (float(px[pos]), float(py[pos]))
    log_px = np.array([cache[int(i)][0] for i in batch.indices])
    log_py = np.array([cache[int(i)][1] for i in batch.indices])
    return log_px, log_py


def _maybe_normalize(batch, log_px, log_py, logp_yx, logp_xy, config):
    if not config.length_normalized_dual:
        return log_px, log_py, logp_yx, logp_xy
    x_tokens = batch.code_mask.sum(axis=1) - 1
    y_tokens = batch.query_mask.sum(axis=1) - 1
    return (
        log_px / x_tokens,
        log_py / y_tokens,
        ad.mul(logp_yx, 1.0 / y_tokens),
        ad.mul(logp_xy, 1.0 / x_tokens),
    )


def algorithm1_step(model, lms, batch, train_rows, config, opts, neg_rng,
                    marginal_cache=None):
    """Run the three sequential sub-updates on one batch and report the loss
    values. The duality term is recomputed in sub-update (2) on the updated
    summarization parameters; the reported L_dual is sub-update (1)'s value
    (falling back to (2)'s when lambda_cs is 0, and to 0.0 when both lambdas
    are 0 but the variant defines the term)."""
    flags = VARIANTS[config.variant]
    marginal_cache = marginal_cache if marginal_cache is not None else {}
    report = {}

    want_dual = flags["dual"]
    if want_dual and (config.lambda_cs > 0 or config.lambda_cg > 0):
        if lms is None:
            raise ConfigError("the duality term needs pretrained language models")
        log_px, log_py = _batch_marginals(batch, lms, marginal_cache)

    def _finite(loss):
        if not np.isfinite(loss.data):
            raise FloatingPointError("non-finite loss")
        return loss

    if flags["summarizer"]:
        model.zero_grads()
        with ad.Tape() as tape:
            logp_yx = model.teacher_forced_logprob(
                "summarize", batch.code_matrix, batch.code_mask,
                batch.query_matrix, batch.query_mask,
            )
            l_cs = ad.mean_all(ad.mul(logp_yx, -1.0))
            loss = l_cs
            if want_dual and config.lambda_cs > 0:
                logp_xy = model.teacher_forced_logprob(
                    "generate", batch.query_matrix, batch.query_mask,
                    batch.code_matrix, batch.code_mask,
                )
                px, py, lyx, lxy = _maybe_normalize(
                    batch, log_px, log_py, logp_yx, logp_xy, config
                )
                l_dual = dual_gap_loss(px, py, lyx, lxy)
                loss = ad.add(l_cs, ad.mul(l_dual, config.lambda_cs))
                report["L_dual"] = float(l_dual.data)
        tape.backward(_finite(loss))
        opts["cs"].step()
        report["L_cs"] = float(l_cs.data)

    if flags["generator"]:
        model.zero_grads()
        with ad.Tape() as tape:
            logp_xy = model.teacher_forced_logprob(
                "generate", batch.query_matrix, batch.query_mask,
                batch.code_matrix, batch.code_mask,
            )
            l_cg = ad.mean_all(ad.mul(logp_xy, -1.0))
            loss = l_cg
            if want_dual and config.lambda_cg > 0:
                logp_yx = model.teacher_forced_logprob(
                    "summarize", batch.code_matrix, batch.code_mask,
                    batch.query_matrix, batch.query_mask,
                )
                px, py, lyx, lxy = _maybe_normalize(
                    batch, log_px, log_py, logp_yx, logp_xy, config
                )
                l_dual = dual_gap_loss(px, py, lyx, lxy)
                loss = ad.add(l_cg, ad.mul(l_dual, config.lambda_cg))
                report.setdefault("L_dual", float(l_dual.data))
        tape.backward(_finite(loss))
        opts["cg"].step()
        report["L_cg"] = float(l_cg.data)

    # (3) retrieval on freshly sampled negatives
    neg_code, neg_query = sample_negatives(batch, train_rows, neg_rng)
    model.zero_grads()
    with ad.Tape() as tape:
        pos_code = model.pooled_code(batch.code_matrix, batch.code_mask)
        pos_query = model.pooled_query(batch.query_matrix, batch.query_mask)
        s_pos = score(pos_code.vector, pos_query.vector, model.retrieval)
        neg_code_pooled = model.pooled_code(neg_code.code_matrix, neg_code.code_mask)
        if config.negative_mode == "random_pair":
            neg_query_pooled = model.pooled_query(
                neg_query.query_matrix, neg_query.query_mask
            )
            s_neg = score(neg_code_pooled.vector, neg_query_pooled.vector,
                          model.retrieval)
        else:  # mismatched_code: random code against the true query
            s_neg = score(neg_code_pooled.vector, pos_query.vector, model.retrieval)
        l_cr = ranking_loss(s_pos, s_neg, config.margin)
    tape.backward(_finite(l_cr))
    opts["cr"].step()
    report["L_cr"] = float(l_cr.data)

    if want_dual and "L_dual" not in report:
        report["L_dual"] = 0.0
    return report


# ---------------------------------------------------------------------------
# Checkpoint container


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint_file(path, kind, meta, arrays):
    """Write the versioned container: magic, version, JSON header with the
    tensor manifest, then raw little-endian payloads in manifest order."""
    names = sorted(arrays)
    manifest = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype=np.dtype("<f8"))
        manifest.append([name, list(arr.shape), "<f8"])
        arrays[name] = arr
    header = dict(meta)
    header["kind"] = kind
    header["manifest"] = manifest
    blob = _canonical_json(header)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(arrays[name].tobytes())


def load_checkpoint_file(path):
    """Read and fully validate a container; returns (kind, meta, arrays)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} "
            f"(expected {CHECKPOINT_VERSION})"
        )
    (blob_len,) = struct.unpack_from("<Q", raw, 8)
    try:
        header = json.loads(raw[16 : 16 + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted header") from exc
    offset = 16 + blob_len
    arrays = {}
    for name, shape, dtype in header.get("manifest", []):
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(dtype).itemsize
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arrays[name] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after payloads")
    kind = header.pop("kind", "model")
    header.pop("manifest", None)
    return kind, header, arrays


@dataclass
class Checkpoint:
    """Full training state at one epoch boundary."""

    config: TrainConfig
    epoch: int                       # epochs completed
    model_arrays: dict               # name -> float64 array
    best_arrays: dict                # best-validation model tensors
    opt_states: dict                 # opt name -> {"t": int, "arrays": {...}}
    best_record: dict                # {"epoch", "val_mrr", "val_bleu4"}
    patience_left: int
    lr_halved: bool
    history: list
    vocab_sizes: tuple               # (code, query)

    def build_model(self):
        model = build_model(self.config, *self.vocab_sizes)
        restore_model(model, self.best_arrays or self.model_arrays)
        return model


def restore_model(model, arrays):
    named = model.named_tensors()
    missing = set(named) - set(arrays)
    extra = set(arrays) - set(named)
    if missing or extra:
        raise CheckpointError(
            f"checkpoint/model tensor mismatch (missing {sorted(missing)[:3]}, "
            f"unexpected {sorted(extra)[:3]})"
        )
    for name, t in named.items():
        if arrays[name].shape != t.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {arrays[name].shape} "
                f"vs model {t.data.shape}"
            )
        t.data = arrays[name].astype(np.float64).copy()


def save_checkpoint(path, checkpoint):
    arrays = {}
    for name, arr in checkpoint.model_arrays.items():
        arrays[f"model.{name}"] = arr
    for name, arr in checkpoint.best_arrays.items():
        arrays[f"best_model.{name}"] = arr
    opt_steps = {}
    for opt_name, state in checkpoint.opt_states.items():
        opt_steps[opt_name] = state["t"]
        for name, arr in state["arrays"].items():
            arrays[name] = arr
    meta = {
        "config": dataclasses.asdict(checkpoint.config),
        "epoch": checkpoint.epoch,
        "best": checkpoint.best_record,
        "patience_left": checkpoint.patience_left,
        "lr_halved": checkpoint.lr_halved,
        "history": checkpoint.history,
        "opt_steps": opt_steps,
        "vocab_sizes": list(checkpoint.vocab_sizes),
        "rng": {"seed": checkpoint.config.seed, "scheme": "named-streams"},
    }
    save_checkpoint_file(path, "model", meta, arrays)


def load_checkpoint(path):
    kind, meta, arrays = load_checkpoint_file(path)
    if kind != "model":
        raise CheckpointError(f"{path} holds a {kind!r} checkpoint, not a model")
    config = TrainConfig(**meta["config"]).validate()
    model_arrays = {}
    best_arrays = {}
    opt_arrays = {}
    for name, arr in arrays.items():
        if name.startswith("model."):
            model_arrays[name[len("model."):]] = arr
        elif name.startswith("best_model."):
            best_arrays[name[len("best_model."):]] = arr
        else:
            opt_arrays[name] = arr
    opt_states = {
        opt_name: {
            "t": t,
            "arrays": {
                n: a for n, a in opt_arrays.items() if n.startswith(f"opt.{opt_name}.")
            },
        }
        for opt_name, t in meta["opt_steps"].items()
    }
    return Checkpoint(
        config=config,
        epoch=int(meta["epoch"]),
        model_arrays=model_arrays,
        best_arrays=best_arrays,
        opt_states=opt_states,
        best_record=meta["best"],
        patience_left=int(meta["patience_left"]),
        lr_halved=bool(meta["lr_halved"]),
        history=meta["history"],
        vocab_sizes=tuple(meta["vocab_sizes"]),
    )


def save_lm(path, lm, config_meta):
    arrays = {f"model.{n}": t.data for n, t in lm.named_tensors().items()}
    save_checkpoint_file(path, "lm", {"lm": config_meta}, arrays)


def load_lm(path):
    from .lm import LanguageModel

    kind, meta, arrays = load_checkpoint_file(path)
    if kind != "lm":
        raise CheckpointError(f"{path} holds a {kind!r} checkpoint, not an lm")
    cfg = meta["lm"]
    lm = LanguageModel.build(
        side=cfg["side"], vocab_size=cfg["vocab_size"], hidden=cfg["hidden"],
        embed_dim=cfg["embed_dim"], rng=np.random.default_rng(0),
    )
    named = lm.named_tensors()
    for name, t in named.items():
        arr = arrays[f"model.{name}"]
        if arr.shape != t.data.shape:
            raise CheckpointError(f"lm shape mismatch for {name}")
        t.data = arr.astype(np.float64).copy()
    return lm


# ---------------------------------------------------------------------------
# Training loop


def _snapshot(model):
    return {name: t.data.copy() for name, t in model.named_tensors().items()}


def _collect_opt_states(opts):
    return {
        name: {"t": opt.t, "arrays": opt.state_arrays(f"opt.{name}")}
        for name, opt in opts.items()
    }


def _validate(model, splits, config, epoch):
    from .evaluate import retrieval_ranks
    from .metrics import bleu4, mrr as mean_rr

    valid = splits.valid
    if len(valid) < 2:
        return {"val_mrr": 0.0, "val_bleu4": None}
    n_distractors = min(config.val_n_distractors, len(valid) - 1)
    ranks = retrieval_ranks(
        model, valid, n_distractors,
        rng=stream(config.seed, "val-distractors", epoch),
    )
    out = {"val_mrr": mean_rr(ranks)}
    if model.summarizer is not None:
        decoded = [
            splits.vocab_query.decode(
                model.greedy_decode("summarize", ex.code_ids, config.max_query_len)
            )
            for ex in valid
        ]
        out["val_bleu4"] = bleu4(decoded, [ex.raw_query for ex in valid])
    else:
        out["val_bleu4"] = None
    return out


def format_log_line(entry, terms):
    cols = [str(entry["epoch"])]
    cols += [f"{entry[t]:.6f}" for t in terms]
    cols.append(f"{entry['val_mrr']:.6f}")
    if entry.get("val_bleu4") is not None:
        cols.append(f"{entry['val_bleu4']:.6f}")
    return "\t".join(cols)


def train(splits, config, lms=None, out_dir=None, resume_from=None):
    """Run the epoch loop and return (best checkpoint, history).

    Selection is by validation MRR (ties keep the later epoch, preferring
    higher BLEU); training stops at max_epochs or after `patience` epochs
    without strict MRR improvement. With `out_dir`, writes `last.co3k`,
    `best.co3k`, and a tab-separated `train.log`.
    """
    config.validate()
    flags = VARIANTS[config.variant]
    needs_dual = flags["dual"] and (config.lambda_cs > 0 or config.lambda_cg > 0)
    if needs_dual and lms is None:
        raise ConfigError(f"variant {config.variant} needs pretrained language models")
    vocab_sizes = (splits.vocab_code.size, splits.vocab_query.size)

    model = build_model(config, *vocab_sizes)
    opts = build_optimizers(model, config)
    start_epoch = 0
    best_record = {"epoch": -1, "val_mrr": -1.0, "val_bleu4": None}
    best_arrays = _snapshot(model)
    patience_left = config.patience
    lr_halved = False
    history = []

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        # max_epochs/patience may legitimately differ when extending a run
        skip = {"max_epochs", "patience"}
        ours = {k: v for k, v in dataclasses.asdict(config).items() if k not in skip}
        theirs = {k: v for k, v in dataclasses.asdict(ckpt.config).items() if k not in skip}
        if ours != theirs:
            raise CheckpointError("resume config differs from checkpoint config")
        restore_model(model, ckpt.model_arrays)
        for name, opt in opts.items():
            opt.load_state_arrays(
                f"opt.{name}", ckpt.opt_states[name]["arrays"],
                ckpt.opt_states[name]["t"],
            )
            if ckpt.lr_halved:
                opt.lr = config.lr / 2.0
        start_epoch = ckpt.epoch
        best_record = dict(ckpt.best_record)
        best_arrays = dict(ckpt.best_arrays)
        patience_left = ckpt.patience_left
        lr_halved = ckpt.lr_halved
        history = list(ckpt.history)

    terms = loss_terms(config.variant)
    marginal_cache = {}
    log_lines = []

    def _epoch_step(epoch):
        nonlocal lr_halved
        order = stream(config.seed, "shuffle", epoch).permutation(len(splits.train))
        neg_rng = stream(config.seed, "negatives", epoch)
        sums = {t: 0.0 for t in terms}
        count = 0
        for batch in batches_of(splits.train, config.batch_size, order):
            try:
                report = algorithm1_step(
                    model, lms, batch, splits.train, config, opts, neg_rng,
                    marginal_cache,
                )
            except FloatingPointError:
                if lr_halved:
                    raise
                lr_halved = True
                for opt in opts.values():
                    opt.lr /= 2.0
                report = algorithm1_step(
                    model, lms, batch, splits.train, config, opts, neg_rng,
                    marginal_cache,
                )
            for t in terms:
                sums[t] += report.get(t, 0.0)
            count += 1
        return {t: sums[t] / count for t in terms}

    for epoch in range(start_epoch, config.max_epochs):
        epoch_losses = _epoch_step(epoch)
        val = _validate(model, splits, config, epoch)
        entry = {"epoch": epoch, **epoch_losses, **val,
                 "train_loss": sum(epoch_losses.values())}
        history.append(entry)
        log_lines.append(format_log_line(entry, terms))

        improved = val["val_mrr"] > best_record["val_mrr"]
        tied_better = val["val_mrr"] == best_record["val_mrr"] and (
            best_record["val_bleu4"] is None
            or val["val_bleu4"] is None
            or val["val_bleu4"] >= best_record["val_bleu4"]
        )
        if improved or tied_better:
            best_record = {"epoch": epoch, "val_mrr": val["val_mrr"],
                           "val_bleu4": val["val_bleu4"]}
            best_arrays = _snapshot(model)
        patience_left = config.patience if improved else patience_left - 1

        if out_dir is not None:
            _write_outputs(out_dir, config, model, opts, epoch, best_record,
                           best_arrays, patience_left, lr_halved, history,
                           vocab_sizes, terms, log_lines)
        if patience_left <= 0:
            break

    final = Checkpoint(
        config=config, epoch=history[-1]["epoch"] + 1 if history else 0,
        model_arrays=_snapshot(model), best_arrays=best_arrays,
        opt_states=_collect_opt_states(opts), best_record=best_record,
        patience_left=patience_left, lr_halved=lr_halved, history=history,
        vocab_sizes=vocab_sizes,
    )
    return final, history


def _write_outputs(out_dir, config, model, opts, epoch, best_record, best_arrays,
                   patience_left, lr_halved, history, vocab_sizes, terms,
                   log_lines):
    import os

    os.makedirs(out_dir, exist_ok=True)
    ckpt = Checkpoint(
        config=config, epoch=epoch + 1, model_arrays=_snapshot(model),
        best_arrays=best_arrays, opt_states=_collect_opt_states(opts),
        best_record=best_record, patience_left=patience_left,
        lr_halved=lr_halved, history=history, vocab_sizes=vocab_sizes,
    )
    save_checkpoint(os.path.join(out_dir, "last.co3k"), ckpt)
    if best_record["epoch"] == epoch:
        save_checkpoint(os.path.join(out_dir, "best.co3k"), ckpt)
    header = "\t".join(
        ["epoch"] + terms + ["val_MRR"]
        + (["val_BLEU4"] if history[-1].get("val_bleu4") is not None else [])
    )
    with open(os.path.join(out_dir, "train.log"), "w", encoding="utf-8") as fh:
        fh.write("# " + header + "\n")
        for line in log_lines:
            fh.write(line + "\n")
