"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in execution
order; :func:`backward` replays the tape in reverse and accumulates gradients
into every tensor created with ``requires_grad=True`` (the parameters).
Intermediate gradients live only for the duration of the backward pass.

Data is float32 by default. float64 tensors are supported so that finite
difference oracles can run with enough precision.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32
UL_CLAMP_EPS = 1e-12


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of a tape (e.g. replaying one twice)."""


class Tensor:
    """A dense array with an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype_for(data))
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self.meta: dict = {}

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_lift(other, self.dtype), _lift(-1.0, self.dtype)))

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _default_dtype_for(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return DEFAULT_DTYPE


def _lift(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: object  # callable: grad_out -> tuple of input grads (or None)
    op: str


@dataclass
class Tape:
    """Ordered record of primitive operations executed while active."""

    records: list[_Record] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self.records)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or "_taped" in t.meta


def _commit(out: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    result = Tensor(out, dtype=out.dtype)
    tape = _active_tape()
    if tape is not None and not tape.consumed and any(_tracked(t) for t in inputs):
        result.meta["_taped"] = tape
        tape.records.append(_Record(result, inputs, backward, op))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for every parameter on the tape."""
    if tape.consumed:
        raise TapeError("tape has already been consumed by a backward pass")
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for inp, ig in zip(rec.inputs, in_grads):
            if ig is None or not _tracked(inp):
                continue
            if inp.requires_grad:
                inp.grad = ig.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + ig
            if "_taped" in inp.meta:
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
    tape.records.clear()


# ----------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _commit(out, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _commit(out, (a, b), bw, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; a may carry leading batch dims when b is 2-D."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    flat = b.data.ndim == 2
    if flat:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = np.matmul(a.data, b.data)

    def bw(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _commit(out, (a, b), bw, "matmul")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def bw(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _commit(out, (a,), bw, "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.sum() / n, dtype=a.dtype)

    def bw(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return _commit(out, (a,), bw, "mean")


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.dtype.type(c)

    def bw(g):
        return (g * a.dtype.type(c),)

    return _commit(out, (a,), bw, "scale")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _commit(out, (a,), bw, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bw(g):
        return (g.transpose(inverse),)

    return _commit(out, (a,), bw, "transpose")


def split_last(a: Tensor, parts: int) -> list[Tensor]:
    """Split the last axis into ``parts`` equal slices."""
    width = a.shape[-1] // parts
    outs = []
    for i in range(parts):
        sl = slice(i * width, (i + 1) * width)

        def bw(g, sl=sl):
            full = np.zeros(a.shape, dtype=g.dtype)
            full[..., sl] = g
            return (full,)

        outs.append(_commit(np.ascontiguousarray(a.data[..., sl]), (a,), bw, "split"))
    return outs


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``table[ids]``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def bw(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _commit(out, (table,), bw, "embedding")


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    c = x.dtype.type(math.sqrt(2.0 / math.pi))
    k = x.dtype.type(0.044715)
    inner = c * (x + k * (x * x * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1 + th)

    def bw(g):
        dinner = c * (1 + 3 * k * (x * x))
        return (g * (0.5 * (1 + th) + 0.5 * x * (1 - th * th) * dinner),)

    return _commit(out, (a,), bw, "gelu")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        d = x.shape[-1]
        gx = g * gain.data
        dx = inv / d * (d * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return dx, ggain, gbias

    return _commit(out, (a, gain, bias), bw, "layer_norm")


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis with key positions > query positions masked out.

    ``scores`` has shape (..., Tq, Tk) with query i aligned to key Tk - Tq + i.
    """
    tq, tk = scores.shape[-2:]
    mask = np.triu(np.ones((tq, tk), dtype=bool), k=tk - tq + 1)
    z = np.where(mask, -np.inf, scores.data)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _commit(p, (scores,), bw, "causal_softmax")


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]


def log_softmax_rows(z: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis (max-subtracted)."""
    if z.shape[-1] < 2:
        raise ValueError("log_softmax_rows needs at least 2 columns")
    out = z.data - _logsumexp(z.data)[..., None]

    def bw(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _commit(out, (z,), bw, "log_softmax")


def _check_targets(logits: Tensor, targets) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    return targets


def nll_loss(logits: Tensor, targets) -> Tensor:
    """Mean over all positions of -log softmax(logits)[target]."""
    targets = _check_targets(logits, targets)
    z = logits.data
    lse = _logsumexp(z)
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    count = targets.size
    out = np.asarray((lse - picked).sum() / count, dtype=z.dtype)

    def bw(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1, axis=-1)
        return (p * (g / count),)

    return _commit(out, (logits,), bw, "nll_loss")


def unlikelihood_loss(logits: Tensor, targets) -> Tensor:
    """-sum_t log(1 - p(target_t)), averaged over leading batch sequences.

    For a (T, V) input the result is the per-sequence sum; for (B, T, V) it is
    the mean over B of per-sequence sums. log(1 - p) is evaluated as
    logsumexp over non-target logits minus logsumexp over all logits, clamped
    below at log(eps). Clamped positions keep the unclamped gradient; their
    count is reported in ``result.meta["clamped"]``.
    """
    targets = _check_targets(logits, targets)
    z = logits.data
    lse = _logsumexp(z)
    others = z.copy()
    np.put_along_axis(others, targets[..., None], -np.inf, axis=-1)
    lse_other = _logsumexp(others)
    log_comp = lse_other - lse
    floor = math.log(UL_CLAMP_EPS)
    clamped = int((log_comp < floor).sum())
    log_comp = np.maximum(log_comp, z.dtype.type(floor))
    n_seq = 1 if z.ndim == 2 else int(np.prod(z.shape[:-2]))
    out = np.asarray(-log_comp.sum() / n_seq, dtype=z.dtype)

    def bw(g):
        p = np.exp(z - lse[..., None])
        q = np.exp(others - lse_other[..., None])
        return ((p - q) * (g / n_seq),)

    result = _commit(out, (logits,), bw, "unlikelihood_loss")
    result.meta["clamped"] = clamped
    if clamped:
        warnings.warn(f"unlikelihood_loss clamped {clamped} saturated token(s)", RuntimeWarning, stacklevel=2)
    return result


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update in place (no weight decay)."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        dt = p.dtype.type
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        p.data -= dt(lr) * update
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError(f"adam step produced non-finite values in {name}")
