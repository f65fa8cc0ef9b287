"""Minimal reverse-mode automatic differentiation over numpy arrays.

Exactly the primitives the model needs, recorded on an explicit tape.
Forward evaluation outside a `with Tape()` block records nothing and is the
fast path used for decoding and evaluation. 64-bit floats are the default;
call `set_default_dtype(np.float32)` for the (less precisely checkable)
speed mode.
"""

import numpy as np

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be np.float32 or np.float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


class ShapeMismatchError(ValueError):
    """Raised when an op receives incompatibly shaped operands."""


class Tensor:
    """A numpy array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = self.name or "tensor"
        return f"<{tag} shape={self.data.shape} grad={'yes' if self.requires_grad else 'no'}>"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def tensor(data, name=None):
    return Tensor(data, requires_grad=False, name=name)


def param(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape

_ACTIVE_TAPES = []


class Tape:
    """Ordered record of primitive applications; replayed in reverse by backward."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss):
        if loss.data.ndim != 0:
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if not np.isfinite(loss.data):
            raise FloatingPointError("backward on a non-finite loss")
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for out, backprop in reversed(self._nodes):
            if out.grad is not None:
                backprop(out.grad)


def backward(tape, loss):
    tape.backward(loss)


def _record(out, backprop):
    if _ACTIVE_TAPES and out.requires_grad:
        _ACTIVE_TAPES[-1]._nodes.append((out, backprop))


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(
            f"matmul expects (M,K)@(K,N), got {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backprop(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    _record(out, backprop)
    return out


def transpose(a):
    out = Tensor(a.data.T, requires_grad=a.requires_grad)

    def backprop(g):
        _accumulate(a, g.T)

    _record(out, backprop)
    return out


def _elementwise_pair(a, b, fwd, da, db, opname):
    a, b = _lift(a), _lift(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatchError(
            f"{opname} on incompatible shapes {a.data.shape} and {b.data.shape}"
        ) from exc
    out = Tensor(data, requires_grad=a.requires_grad or b.requires_grad)

    def backprop(g):
        _accumulate(a, _unbroadcast(da(g, a.data, b.data), a.data.shape))
        _accumulate(b, _unbroadcast(db(g, a.data, b.data), b.data.shape))

    _record(out, backprop)
    return out


def add(a, b):
    return _elementwise_pair(
        a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, "add"
    )


def sub(a, b):
    return _elementwise_pair(
        a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, "sub"
    )


def mul(a, b):
    return _elementwise_pair(
        a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul"
    )


def squared_difference(a, b):
    return _elementwise_pair(
        a,
        b,
        lambda x, y: (x - y) ** 2,
        lambda g, x, y: 2.0 * g * (x - y),
        lambda g, x, y: -2.0 * g * (x - y),
        "squared_difference",
    )


def _elementwise_unary(a, fwd_from_x, grad_from_out):
    data = fwd_from_x(a.data)
    out = Tensor(data, requires_grad=a.requires_grad)

    def backprop(g):
        _accumulate(a, g * grad_from_out(a.data, data))

    _record(out, backprop)
    return out


def sigmoid(a):
    def stable(x):
        pos = x >= 0
        z = np.empty_like(x)
        z[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        z[~pos] = ex / (1.0 + ex)
        return z

    return _elementwise_unary(a, stable, lambda x, y: y * (1.0 - y))


def tanh(a):
    return _elementwise_unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def exp(a):
    return _elementwise_unary(a, np.exp, lambda x, y: y)


def log(a):
    return _elementwise_unary(a, np.log, lambda x, y: 1.0 / x)


def relu(a):
    # subgradient at 0 is 0
    return _elementwise_unary(
        a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(x.dtype)
    )


def clamp_min(a, floor):
    """max(a, floor); gradient passes only where a > floor."""
    return _elementwise_unary(
        a, lambda x: np.maximum(x, floor), lambda x, y: (x > floor).astype(x.dtype)
    )


def concat(parts, axis=-1):
    parts = [_lift(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parts))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backprop(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            _accumulate(p, g[tuple(idx)])

    _record(out, backprop)
    return out


def stack(parts, axis=1):
    parts = [_lift(p) for p in parts]
    data = np.stack([p.data for p in parts], axis=axis)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parts))

    def backprop(g):
        for k, p in enumerate(parts):
            _accumulate(p, np.take(g, k, axis=axis))

    _record(out, backprop)
    return out


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad)

    def backprop(g):
        _accumulate(a, g.reshape(a.data.shape))

    _record(out, backprop)
    return out


def rows(table, ids):
    """Embedding lookup: select rows of `table` by an integer id array."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"id out of range for table with {table.data.shape[0]} rows"
        )
    out = Tensor(table.data[ids], requires_grad=table.requires_grad)

    def backprop(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(
            table.grad, ids.reshape(-1), g.reshape(-1, table.data.shape[1])
        )

    _record(out, backprop)
    return out


def pick(p, ids):
    """Row-wise gather: out[b] = p[b, ids[b]]."""
    ids = np.asarray(ids)
    n = p.data.shape[0]
    out = Tensor(p.data[np.arange(n), ids], requires_grad=p.requires_grad)

    def backprop(g):
        full = np.zeros_like(p.data)
        full[np.arange(n), ids] = g
        _accumulate(p, full)

    _record(out, backprop)
    return out


def masked_where(mask, a, b):
    """out = a where mask else b; mask is a constant boolean array."""
    mask = np.asarray(mask, dtype=bool)
    a, b = _lift(a), _lift(b)
    data = np.where(mask, a.data, b.data)
    out = Tensor(data, requires_grad=a.requires_grad or b.requires_grad)

    def backprop(g):
        _accumulate(a, _unbroadcast(np.where(mask, g, 0.0), a.data.shape))
        _accumulate(b, _unbroadcast(np.where(mask, 0.0, g), b.data.shape))

    _record(out, backprop)
    return out


def softmax_masked(scores, mask=None, axis=-1):
    """Softmax assigning exactly zero probability to masked-out positions.

    `mask` is a constant boolean array (True = keep); None keeps everything.
    Rows with no kept position are an error.
    """
    x = scores.data
    if mask is None:
        keep = np.ones_like(x, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not keep.any(axis=axis).all():
        raise ValueError("softmax_masked: some row has every position masked")
    shifted = np.where(keep, x, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.where(keep, np.exp(shifted), 0.0)
    probs = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(probs, requires_grad=scores.requires_grad)

    def backprop(g):
        inner = (g * probs).sum(axis=axis, keepdims=True)
        _accumulate(scores, probs * (g - inner))

    _record(out, backprop)
    return out


def max_over_time(states, mask):
    """Coordinate-wise max over unmasked time steps of a (B, T, H) tensor.

    Returns (values (B, H), argmax time indices (B, H)). Ties go to the
    lowest time index; rows with no unmasked step are an error.
    """
    x = states.data
    if x.ndim != 3:
        raise ShapeMismatchError(f"max_over_time expects (B,T,H), got {x.shape}")
    keep = np.asarray(mask, dtype=bool)
    if not keep.any(axis=1).all():
        raise ValueError("max_over_time: some row has every position masked")
    masked = np.where(keep[:, :, None], x, -np.inf)
    argmax = masked.argmax(axis=1)  # first occurrence wins ties
    b_idx = np.arange(x.shape[0])[:, None]
    h_idx = np.arange(x.shape[2])[None, :]
    out = Tensor(masked[b_idx, argmax, h_idx], requires_grad=states.requires_grad)

    def backprop(g):
        full = np.zeros_like(x)
        np.add.at(full, (b_idx, argmax, h_idx), g)
        _accumulate(states, full)

    _record(out, backprop)
    return out, argmax


def bdot(states, v):
    """Batched dot over time: out[b, t] = states[b, t, :] . v[b, :]."""
    if states.data.ndim != 3 or v.data.ndim != 2 or states.data.shape[::2] != v.data.shape:
        raise ShapeMismatchError(
            f"bdot expects (B,T,H) and (B,H), got {states.data.shape} and {v.data.shape}"
        )
    out = Tensor(
        np.einsum("bth,bh->bt", states.data, v.data),
        requires_grad=states.requires_grad or v.requires_grad,
    )

    def backprop(g):
        _accumulate(states, g[:, :, None] * v.data[:, None, :])
        _accumulate(v, np.einsum("bt,bth->bh", g, states.data))

    _record(out, backprop)
    return out


def bweight(states, w):
    """Weighted sum over time: out[b, :] = sum_t w[b, t] * states[b, t, :]."""
    if states.data.ndim != 3 or w.data.shape != states.data.shape[:2]:
        raise ShapeMismatchError(
            f"bweight expects (B,T,H) and (B,T), got {states.data.shape} and {w.data.shape}"
        )
    out = Tensor(
        np.einsum("bt,bth->bh", w.data, states.data),
        requires_grad=states.requires_grad or w.requires_grad,
    )

    def backprop(g):
        _accumulate(states, w.data[:, :, None] * g[:, None, :])
        _accumulate(w, np.einsum("bth,bh->bt", states.data, g))

    _record(out, backprop)
    return out


def cosine(a, b):
    """Row-wise cosine similarity of (B, R) tensors; zero-norm rows score 0."""
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ShapeMismatchError(
            f"cosine expects matching (B,R) shapes, got {a.data.shape} and {b.data.shape}"
        )
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    ok = (na > 0) & (nb > 0)
    denom = np.where(ok, na * nb, 1.0)
    cos = np.where(ok, (a.data * b.data).sum(axis=1) / denom, 0.0)
    out = Tensor(cos, requires_grad=a.requires_grad or b.requires_grad)

    def backprop(g):
        g = np.where(ok, g, 0.0)
        safe_na = np.where(ok, na, 1.0)
        ga = (b.data / denom[:, None] - cos[:, None] * a.data / (safe_na**2)[:, None])
        safe_nb = np.where(ok, nb, 1.0)
        gb = (a.data / denom[:, None] - cos[:, None] * b.data / (safe_nb**2)[:, None])
        _accumulate(a, g[:, None] * ga)
        _accumulate(b, g[:, None] * gb)

    _record(out, backprop)
    return out


def sum_all(a):
    out = Tensor(a.data.sum(), requires_grad=a.requires_grad)

    def backprop(g):
        _accumulate(a, np.full_like(a.data, g))

    _record(out, backprop)
    return out


def sum_axis(a, axis):
    out = Tensor(a.data.sum(axis=axis), requires_grad=a.requires_grad)

    def backprop(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    _record(out, backprop)
    return out


def mean_all(a):
    n = a.data.size
    out = Tensor(a.data.mean(), requires_grad=a.requires_grad)

    def backprop(g):
        _accumulate(a, np.full_like(a.data, g / n))

    _record(out, backprop)
    return out


# ---------------------------------------------------------------------------
# Gradient checking


def check_gradients(fn, params, eps=1e-5, max_coords=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    `fn` must be a deterministic zero-argument callable returning a scalar
    Tensor computed from `params`. Checks every coordinate unless
    `max_coords` caps the per-parameter sample (drawn from `rng`).
    """
    if not (0 < eps <= 1e-2):
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    if loss.data.ndim != 0:
        raise ValueError("check_gradients requires a scalar-valued fn")
    if not np.isfinite(loss.data):
        raise FloatingPointError("check_gradients: fn produced a non-finite value")
    tape.backward(loss)

    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            up = float(fn().data)
            flat[idx] = orig - eps
            dn = float(fn().data)
            flat[idx] = orig
            if not (np.isfinite(up) and np.isfinite(dn)):
                raise FloatingPointError(
                    "check_gradients: non-finite value during perturbation"
                )
            cd = (up - dn) / (2.0 * eps)
            an = analytic.reshape(-1)[idx]
            err = abs(an - cd) / max(abs(an), abs(cd), 1e-8)
            worst = max(worst, err)
    return worst
