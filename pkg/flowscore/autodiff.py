# flowscore/autodiff.py

"""
Tape-based reverse-mode differentiation over dense numpy arrays.

Every primitive computes its output eagerly and, when at least one input is
tracked, appends a Node to the tape holding a closure that maps the output
gradient to input gradients. `backward` replays the tape in reverse and
accumulates into the ParameterStore's gradient buffers.

Broadcasting is limited to adding a row-vector bias to a matrix.
"""

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logsumexp

from .errors import ShapeError

if TYPE_CHECKING:
    from .params import ParameterStore

Grad = Optional[np.ndarray]
ArrayLike = Union["Tensor", np.ndarray, float, int]


@dataclass
class Node:
    op: str
    inputs: Tuple[Optional[int], ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[Grad]]


class Tensor:
    __slots__ = ("data", "tape", "id")

    def __init__(self, data: np.ndarray, tape: Optional["Tape"] = None, node_id: Optional[int] = None) -> None:
        self.data = np.asarray(data)
        self.tape = tape
        self.id = node_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def tracked(self) -> bool:
        return self.id is not None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, tracked={self.tracked})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)


class Tape:
    """
    Records primitive calls for one forward pass. A disabled tape (see
    `no_grad`) hands out parameters as constants, so nothing is recorded.
    """

    def __init__(self, enabled: bool = True) -> None:
        self.enabled = enabled
        self.nodes: List[Node] = []
        self.leaves: Dict[int, str] = {}
        self.store: Optional["ParameterStore"] = None
        self._params: Dict[str, Tensor] = {}
        self._next_id = 0

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def param(self, store: "ParameterStore", name: str) -> Tensor:
        if not self.enabled:
            return Tensor(store.params[name])
        if self.store is None:
            self.store = store
        elif self.store is not store:
            raise ValueError("a tape records parameters from a single store")
        t = self._params.get(name)
        if t is None:
            t = Tensor(store.params[name], self, self._new_id())
            self.leaves[t.id] = name
            self._params[name] = t
        return t

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, backward: Callable) -> Tensor:
        nid = self._new_id()
        self.nodes.append(Node(op, tuple(x.id for x in inputs), nid, backward))
        return Tensor(out, self, nid)


def no_grad() -> Tape:
    return Tape(enabled=False)


def constant(data: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(data, Tensor):
        return data
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(data, dtype=dtype))


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def _result(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward: Callable) -> Tensor:
    for x in inputs:
        if x.tracked and x.tape is not None and x.tape.enabled:
            return x.tape.record(op, inputs, out, backward)
    return Tensor(out)


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, constant(b, a)
    b = constant(b)
    return constant(a, b), b


# ---------- Linear algebra ----------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def backward(g: np.ndarray) -> Sequence[Grad]:
        return g @ B.T, A.T @ g

    return _result("matmul", (a, b), A @ B, backward)


def _is_bias(a: Tensor, b: Tensor) -> bool:
    if a.data.ndim != 2:
        return False
    return b.shape == (a.shape[1],) or b.shape == (1, a.shape[1])


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    if a.shape == b.shape:
        return _result("add", (a, b), a.data + b.data, lambda g: (g, g))
    if _is_bias(a, b):
        shape_b = b.shape
        return _result("add", (a, b), a.data + b.data, lambda g: (g, g.sum(axis=0).reshape(shape_b)))
    raise ShapeError("add", a.shape, b.shape)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    if a.shape == b.shape:
        return _result("sub", (a, b), a.data - b.data, lambda g: (g, -g))
    if _is_bias(a, b):
        shape_b = b.shape
        return _result("sub", (a, b), a.data - b.data, lambda g: (g, -g.sum(axis=0).reshape(shape_b)))
    raise ShapeError("sub", a.shape, b.shape)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    A, B = a.data, b.data
    return _result("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    return _result("scale", (a,), a.data * a.dtype.type(c), lambda g: (g * c,))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError("concat", *(x.shape for x in tensors))
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> Sequence[Grad]:
        return np.split(g, cuts, axis=ax)

    return _result("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=ax), backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _result("reshape", (x,), out, lambda g: (g.reshape(old),))


# ---------- Elementwise ----------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype, copy=False), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data).astype(x.dtype, copy=False)
    return _result("sigmoid", (x,), s, lambda g: (g * s * (1 - s),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result("exp", (x,), out, lambda g: (g * out,))


# ---------- Row reductions ----------

def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("softmax_rows", x.shape)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> Sequence[Grad]:
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _result("softmax_rows", (x,), out, backward)


def mean_rows(x: Tensor) -> Tensor:
    """(n, d) -> (1, d); an empty input yields zeros."""
    if x.data.ndim != 2:
        raise ShapeError("mean_rows", x.shape)
    n = x.shape[0]
    if n == 0:
        out = np.zeros((1, x.shape[1]), dtype=x.dtype)
    else:
        out = x.data.mean(axis=0, keepdims=True)
    return _result("mean_rows", (x,), out, lambda g: (np.repeat(g / max(n, 1), n, axis=0),))


def segment_mean(x: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Row means grouped by `segments`; segments with no rows are zero."""
    if x.data.ndim != 2 or len(segments) != x.shape[0]:
        raise ShapeError("segment_mean", x.shape, np.shape(segments))
    seg = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(seg, minlength=num_segments).astype(x.dtype)
    denom = np.maximum(counts, 1)[:, None]
    out = np.zeros((num_segments, x.shape[1]), dtype=x.dtype)
    np.add.at(out, seg, x.data)
    out /= denom

    def backward(g: np.ndarray) -> Sequence[Grad]:
        return ((g / denom)[seg],)

    return _result("segment_mean", (x,), out, backward)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    n_rows = x.shape[0]
    shape = x.shape

    def backward(g: np.ndarray) -> Sequence[Grad]:
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    if len(idx) and (idx.min() < 0 or idx.max() >= n_rows):
        raise ShapeError("gather_rows", x.shape, idx.shape)
    return _result("gather_rows", (x,), x.data[idx], backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result("sum_all", (x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, g, dtype=x.dtype),))


# ---------- Losses ----------

def squared_error(pred: Tensor, target: ArrayLike) -> Tensor:
    """Mean over rows of the squared L2 distance between rows."""
    pred, target = _pair(pred, target)
    if pred.shape != target.shape or pred.data.ndim != 2:
        raise ShapeError("squared_error", pred.shape, target.shape)
    n = pred.shape[0]
    if n == 0:
        raise ShapeError("squared_error", pred.shape, target.shape)
    diff = pred.data - target.data
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)

    def backward(g: np.ndarray) -> Sequence[Grad]:
        d = diff * (2.0 * g / n)
        return d, -d

    return _result("squared_error", (pred, target), out, backward)


def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the target column of each row."""
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != len(tgt) or len(tgt) == 0:
        raise ShapeError("cross_entropy_with_logits", logits.shape, tgt.shape)
    n, c = logits.shape
    if tgt.min() < 0 or tgt.max() >= c:
        raise ShapeError("cross_entropy_with_logits", logits.shape, tgt.shape)
    z = logits.data
    lse = logsumexp(z, axis=1)
    rows = np.arange(n)
    out = np.asarray((lse - z[rows, tgt]).mean(), dtype=logits.dtype)

    def backward(g: np.ndarray) -> Sequence[Grad]:
        p = np.exp(z - lse[:, None])
        p[rows, tgt] -= 1.0
        return ((p * (g / n)).astype(z.dtype, copy=False),)

    return _result("cross_entropy_with_logits", (logits,), out, backward)


def l2_penalty(params: Sequence[Tensor]) -> Tensor:
    """Sum of squares of every entry of every tensor."""
    if not params:
        return Tensor(np.asarray(0.0))
    datas = [p.data for p in params]
    out = np.asarray(sum(float((d * d).sum()) for d in datas), dtype=params[0].dtype)

    def backward(g: np.ndarray) -> Sequence[Grad]:
        return [2.0 * g * d for d in datas]

    return _result("l2_penalty", tuple(params), out, backward)


# ---------- Reverse pass ----------

def backward(tape: Tape, loss: Tensor) -> Dict[str, np.ndarray]:
    """
    Accumulate d(loss)/d(param) into the store's gradient buffers and return
    them. Parameters the loss does not reach keep their (zero) gradient.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape)
    store = tape.store
    if not loss.tracked or store is None:
        return store.grads if store is not None else {}

    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        for nid, gi in zip(node.inputs, node.backward(g)):
            if nid is None or gi is None:
                continue
            prev = grads.get(nid)
            grads[nid] = gi if prev is None else prev + gi

    for nid, name in tape.leaves.items():
        g = grads.get(nid)
        if g is not None:
            store.grads[name] += g.reshape(store.grads[name].shape).astype(store.dtype, copy=False)
    return store.grads
