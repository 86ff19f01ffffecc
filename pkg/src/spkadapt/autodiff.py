"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside a tape nothing is recorded,
which is how evaluation runs.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(matmul(Tensor(np.eye(2)), w))
    >>> backward(loss, tape)
    >>> w.grad
    array([[1., 1.],
           [1., 1.]])
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

NEG_FILL = -1e9


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A dense float64 array, optionally tracked for gradients.

    ``grad`` is only ever populated on leaf tensors (parameters and inputs
    created by the user); intermediate results carry their gradients inside
    :func:`backward` only.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; tapes nest, and operations record on the
    innermost one. Records are appended in execution order, so every node's
    inputs were produced by earlier nodes or are leaves.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.is_leaf and t.requires_grad and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())


def _active_tape() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


def _make(out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out`` and record it when any input is tracked."""
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.name = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.is_leaf = False
        tape.nodes.append(_Node(tuple(inputs), result, backward_fn))
    else:
        result.requires_grad = False
        result.is_leaf = True
    return result


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Gradients are summed per call and then added to any existing ``grad``,
    so calling twice without :func:`zero_grads` doubles them exactly. Tracked
    leaves on the tape that the loss does not reach get a zero gradient.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf and loss.requires_grad:
        leaf_grads[id(loss)] = np.ones_like(loss.data)
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            store = leaf_grads if inp.is_leaf else grads
            key = id(inp)
            if inp.is_leaf:
                leaves[key] = inp
            prev = store.get(key)
            store[key] = gi if prev is None else prev + gi
    for key, g in leaf_grads.items():
        leaf = leaves[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    for leaf in tape.leaves():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as err:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from err
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as err:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from err
    ad, bd = a.data, b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or ``rng`` is None."""
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


def masked_fill(a: Tensor, mask: np.ndarray, value: float = NEG_FILL) -> Tensor:
    """Replace entries where ``mask`` is True by a constant.

    ``mask`` must broadcast to ``a``'s shape without changing it.
    """
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, a.shape)
    except ValueError as err:
        raise ShapeError(f"mask shape {mask.shape} does not fit {a.shape}") from err
    out = np.where(full, value, a.data)
    return _make(out, (a,), lambda g: (np.where(full, 0.0, g),))


# ------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def _back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # weight shared across the batch: fold leading axes into rows
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), _back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _make(
        np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, src),)
    )


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along ``axis``; the backward pass splits by range."""
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(
                f"cannot concatenate {ref} and {t.shape} along axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def _back(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make(out, tuple(tensors), _back)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Stack the rows of ``b`` under the rows of ``a``."""
    return concat([a, b], axis=-2)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ValueError(
            f"token id out of range [0, {weight.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )

    def _back(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.ravel(), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), _back)


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """Index the flattened ``a``; entries of ``index`` equal to -1 read zero.

    This is the building block for zero-padded patch extraction (im2col).
    """
    flat = np.concatenate([a.data.ravel(), [0.0]])
    index = np.asarray(index, dtype=np.int64)
    safe = np.where(index < 0, flat.size - 1, index)
    src_shape = a.shape

    def _back(g):
        gf = np.zeros(flat.size)
        np.add.at(gf, safe.ravel(), g.ravel())
        return (gf[:-1].reshape(src_shape),)

    return _make(flat[safe], (a,), _back)


# -------------------------------------------------------------- reductions


def sum_all(a: Tensor) -> Tensor:
    src = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return scale(sum_all(a), 1.0 / n)


# ---------------------------------------------------------- normalisations


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def _back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), _back)


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then affine."""
    n = x.shape[-1]
    if n < 2:
        raise ShapeError(f"layer_norm needs at least 2 features, got {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def _back(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _make(out, (x, gain, bias), _back)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean token negative log-likelihood over non-ignored positions.

    ``logits`` has shape ``(..., V)`` and ``targets`` the leading shape.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(
            f"logits {logits.shape} do not match targets {targets.shape}"
        )
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    tgt = targets.ravel()
    keep = np.ones(tgt.shape, dtype=bool) if ignore_index is None else tgt != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is ignored")
    m = flat.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(flat - m).sum(axis=1))
    safe_tgt = np.where(keep, tgt, 0)
    picked = flat[np.arange(tgt.size), safe_tgt]
    loss = ((lse - picked) * keep).sum() / count

    def _back(g):
        p = np.exp(flat - lse[:, None])
        p[np.arange(tgt.size), safe_tgt] -= 1.0
        p *= (keep / count)[:, None]
        return ((g * p).reshape(logits.shape),)

    return _make(np.array(loss), (logits,), _back)
