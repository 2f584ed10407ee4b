"""Minimal reverse-mode autodiff over dense 2-D float64 tensors.

Provides exactly the primitives the rest of the package needs: matrix
products, row-wise softmax / normalization / cross-entropy, a gradient
reversal node, and plain SGD. Tapes are per-forward-pass: build a graph
under ``with Tape():``, call :func:`backward` once, and the tape is
freed. Tensors created outside a tape are constants.
"""

from __future__ import annotations

import threading
from typing import Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ValueError):
    """Non-finite or otherwise invalid numeric input."""


class TapeError(RuntimeError):
    """Tape misuse: reuse after backward, or mixing live tapes."""


_STATE = threading.local()

# zero-norm rows seen by l2_normalize_rows; observable, never fatal
_zero_norm_rows = 0


def zero_norm_count() -> int:
    return _zero_norm_rows


def reset_zero_norm_count() -> None:
    global _zero_norm_rows
    _zero_norm_rows = 0


def _active_tape():
    return getattr(_STATE, "tape", None)


class Tensor:
    """Dense rank-<=2 array of float64, optionally recorded on a tape.

    ``node_id`` is the position on the owning tape; constants carry
    ``node_id is None``. After :func:`backward`, every requires_grad
    leaf that participated holds its gradient in ``grad``.
    """

    __slots__ = ("data", "requires_grad", "tape", "node_id", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are rank <= 2, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.tape = None
        self.node_id = None
        self.grad = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Nodes are appended in creation order, which is topological by
    construction. One backward pass per tape; reuse raises.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, list[Tensor], object]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise TapeError("a tape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False

    def _record(self, out: Tensor, parents: list[Tensor], backward_fn) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        out.tape = self
        out.node_id = len(self.nodes)
        self.nodes.append((out, parents, backward_fn))


def _tracked(t: Tensor, tape: Tape) -> bool:
    """True when gradients must flow into ``t`` on this tape."""
    if t.tape is tape and t.node_id is not None:
        return True
    return t.requires_grad and t.tape is None


def _check_tape(*tensors: Tensor) -> None:
    tape = _active_tape()
    for t in tensors:
        if t.tape is not None and t.tape is not tape and not t.tape.consumed:
            raise TapeError("input belongs to a different live tape")


def _maybe_record(out: Tensor, parents: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(_tracked(p, tape) for p in parents):
        tape._record(out, list(parents), backward_fn)
    return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar loss; returns {leaf: gradient}.

    Sets ``leaf.grad`` on every requires_grad leaf reached. Consumes the
    tape; a second backward on the same tape raises TapeError.
    """
    if loss.data.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    tape = loss.tape
    if tape is None or loss.node_id is None:
        raise TapeError("loss is not recorded on a live tape")
    if tape.consumed:
        raise TapeError("tape already consumed by backward()")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for out, parents, backward_fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, backward_fn(g)):
            if pg is None or not _tracked(parent, tape):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent.requires_grad and parent.node_id is None:
                leaf_grads[parent] = grads[key]
    for leaf, g in leaf_grads.items():
        leaf.grad = g
    tape.nodes.clear()
    return leaf_grads


def sgd_step(params: Iterable[Tensor], grads: Mapping[Tensor, np.ndarray],
             lr: float) -> None:
    """In-place SGD update ``p -= lr * g``; params without a gradient stay put."""
    for p in params:
        g = grads.get(p)
        if g is not None:
            p.data -= lr * g


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; rank-1 row (1 x n) broadcasts over rows."""
    _check_tape(a, b)
    ra, ca = a.shape
    rb, cb = b.shape
    if ca != cb or (ra != rb and 1 not in (ra, rb)):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data)

    def _bwd(g):
        ga = g.sum(axis=0, keepdims=True) if ra == 1 and rb != 1 else g
        gb = g.sum(axis=0, keepdims=True) if rb == 1 and ra != 1 else g
        return ga, gb

    return _maybe_record(out, (a, b), _bwd)


def add_scalar(x: Tensor, c: float) -> Tensor:
    _check_tape(x)
    out = Tensor(x.data + c)
    return _maybe_record(out, (x,), lambda g: (g,))


def scale(x: Tensor, c: float) -> Tensor:
    _check_tape(x)
    out = Tensor(x.data * c)
    return _maybe_record(out, (x,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_tape(a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    a_data, b_data = a.data, b.data

    def _bwd(g):
        return g @ b_data.T, a_data.T @ g

    return _maybe_record(out, (a, b), _bwd)


def transpose(x: Tensor) -> Tensor:
    _check_tape(x)
    out = Tensor(x.data.T)
    return _maybe_record(out, (x,), lambda g: (g.T,))


def relu(x: Tensor) -> Tensor:
    _check_tape(x)
    mask = x.data > 0.0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _maybe_record(out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    _check_tape(x)
    z = x.data
    with np.errstate(over="ignore"):
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                     np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    out = Tensor(s)
    return _maybe_record(out, (x,), lambda g: (g * s * (1.0 - s),))


def log(x: Tensor) -> Tensor:
    _check_tape(x)
    out = Tensor(np.log(x.data))
    x_data = x.data
    return _maybe_record(out, (x,), lambda g: (g / x_data,))


def mean_all(x: Tensor) -> Tensor:
    _check_tape(x)
    r, c = x.shape
    out = Tensor(x.data.mean())
    return _maybe_record(out, (x,), lambda g: (np.full((r, c), g[0, 0] / (r * c)),))


def mean_rows(x: Tensor) -> Tensor:
    """Column-wise mean over rows: (m x n) -> (1 x n)."""
    _check_tape(x)
    m = x.shape[0]
    out = Tensor(x.data.mean(axis=0, keepdims=True))
    return _maybe_record(out, (x,), lambda g: (np.repeat(g / m, m, axis=0),))


def gather_rows(x: Tensor, indices) -> Tensor:
    _check_tape(x)
    idx = np.asarray(indices, dtype=np.intp).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")
    out = Tensor(x.data[idx])
    r, c = x.shape

    def _bwd(g):
        gx = np.zeros((r, c))
        np.add.at(gx, idx, g)
        return (gx,)

    return _maybe_record(out, (x,), _bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction."""
    _check_tape(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def _bwd(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _maybe_record(out, (x,), _bwd)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each row to unit L2 norm; zero rows pass through unchanged
    and bump the module's zero-norm counter."""
    global _zero_norm_rows
    _check_tape(x)
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    zero = norms[:, 0] == 0.0
    nz = int(zero.sum())
    if nz:
        _zero_norm_rows += nz
    safe = np.where(zero[:, None], 1.0, norms)
    y = x.data / safe
    out = Tensor(y)
    x_data = x.data

    def _bwd(g):
        gx = g / safe - x_data * ((x_data * g).sum(axis=1, keepdims=True) / safe ** 3)
        if nz:
            gx[zero] = g[zero]
        return (gx,)

    return _maybe_record(out, (x,), _bwd)


def cosine_similarity_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-paired cosine similarity: (m x d, m x d) -> (m x 1)."""
    _check_tape(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine: shapes differ, {a.shape} vs {b.shape}")
    na = np.linalg.norm(a.data, axis=1, keepdims=True)
    nb = np.linalg.norm(b.data, axis=1, keepdims=True)
    if (na == 0.0).any() or (nb == 0.0).any():
        raise NumericError("cosine: zero-norm row")
    dots = (a.data * b.data).sum(axis=1, keepdims=True)
    cos = dots / (na * nb)
    out = Tensor(cos)
    a_data, b_data = a.data, b.data

    def _bwd(g):
        ga = g * (b_data / (na * nb) - cos * a_data / na ** 2)
        gb = g * (a_data / (na * nb) - cos * b_data / nb ** 2)
        return ga, gb

    return _maybe_record(out, (a, b), _bwd)


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target].

    ``targets`` is either a sequence of class indices or an (m x K) array
    of probability rows; either way it is treated as a constant.
    """
    _check_tape(logits)
    m, k = logits.shape
    if k < 2:
        raise ShapeError(f"cross_entropy: need >= 2 classes, got {k}")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + z.max(axis=1, keepdims=True)
    soft = np.exp(z - lse)

    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if t.ndim <= 1 and t.size == m and (t.ndim == 0 or np.issubdtype(t.dtype, np.integer)):
        idx = t.astype(np.intp).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= k):
            raise IndexError(f"cross_entropy: target outside [0, {k})")
        probs = np.zeros((m, k))
        probs[np.arange(m), idx] = 1.0
    else:
        probs = np.asarray(t, dtype=np.float64)
        if probs.shape != (m, k):
            raise ShapeError(f"cross_entropy: target rows {probs.shape} vs logits {logits.shape}")
    loss = float((lse[:, 0] - (probs * z).sum(axis=1)).mean())
    out = Tensor(loss)

    def _bwd(g):
        return ((soft - probs) * (g[0, 0] / m),)

    return _maybe_record(out, (logits,), _bwd)


def grl(x: Tensor, coefficient: float = 1.0) -> Tensor:
    """Gradient reversal: identity forward, upstream gradient times
    -coefficient on the way back."""
    _check_tape(x)
    out = Tensor(x.data.copy())
    return _maybe_record(out, (x,), lambda g: (-coefficient * g,))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b with b a (1 x out) row."""
    return add(matmul(x, w), b)
