"""Dense float64 tensors with tape-based reverse-mode differentiation.

Implements only the primitives a gated-recurrent translation model needs:
matmul, add (with a single bias-row broadcast rule), elementwise mul,
concat/stack/slice/reshape, tanh, sigmoid, stabilized softmax, sum, log,
reciprocal, embedding lookup and scaling by a constant.  Everything is
64-bit; there is no other broadcasting, which keeps every backward rule
small enough to audit by hand.

A ``Tape`` is a define-by-run record: ops executed while a tape is active
append (output, inputs, backward-rule) nodes in execution order, so walking
the list in reverse visits consumers before producers.  Tapes are
single-threaded; distinct tapes over shared read-only parameters may run
concurrently, but gradient accumulation into shared buffers needs external
serialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "GradCheckReport",
    "matmul",
    "add",
    "mul",
    "sub",
    "concat",
    "stack",
    "take",
    "reshape",
    "tanh",
    "sigmoid",
    "softmax",
    "log",
    "reciprocal",
    "tsum",
    "scale",
    "embedding",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes do not conform; names the op and the shapes involved."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        pretty = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: non-conforming shapes {pretty}")


class TapeError(RuntimeError):
    """Tape misuse: backward re-run without reset, or loss not on the tape."""


class Tensor:
    """A row-major float64 array with an optional same-shape gradient buffer.

    Tensors with ``requires_grad`` are trainable leaves and always carry a
    gradient buffer (zeros until a backward pass reaches them).  Gradient
    buffers on intermediates are created lazily during backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


_TAPE_STACK: list["Tape"] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple
    backward: callable


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Inputs are always recorded before their consumers, so a single reverse
    sweep propagates adjoints to every reachable tensor exactly once.  A tape
    may be consumed by ``backward`` only once.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._spent = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    @property
    def nodes(self):
        return tuple(self._nodes)

    def record(self, op, out, inputs, backward):
        self._nodes.append(_Node(op, out, inputs, backward))

    def backward(self, loss):
        """Populate gradients of everything ``loss`` depends on.

        ``loss`` must be a 1-element tensor produced on this tape.  Trainable
        leaves that the loss does not reach keep their (zero) gradients.
        """
        if self._spent:
            raise TapeError("backward already ran on this tape; build a fresh tape")
        if loss.size != 1:
            raise ShapeError("backward", loss.shape)
        if not any(node.out is loss for node in self._nodes):
            raise TapeError("loss tensor was not recorded on this tape")
        self._spent = True
        loss.zero_grad()
        loss.grad.fill(1.0)
        for node in reversed(self._nodes):
            out_grad = node.out.grad
            if out_grad is None:
                continue  # this output never fed the loss
            grads = node.backward(out_grad)
            for tensor, g in zip(node.inputs, grads):
                if g is None:
                    continue
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad += g


def _emit(op, out, inputs, backward):
    tape = _active_tape()
    if tape is not None:
        tape.record(op, out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b):
    """Matrix product; accepts 2D@2D, 1D@2D and 2D@1D."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        ok = ad.shape[1] == bd.shape[0]
    elif ad.ndim == 1 and bd.ndim == 2:
        ok = ad.shape[0] == bd.shape[0]
    elif ad.ndim == 2 and bd.ndim == 1:
        ok = ad.shape[1] == bd.shape[0]
    else:
        ok = False
    if not ok:
        raise ShapeError("matmul", ad.shape, bd.shape)
    out = Tensor(ad @ bd)

    def backward(g):
        if ad.ndim == 1:  # (k,)@(k,n) -> (n,)
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:  # (m,k)@(k,) -> (m,)
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _emit("matmul", out, (a, b), backward)


def add(a, b):
    """Elementwise sum; the only broadcast allowed is matrix + bias row."""
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        out = Tensor(ad + bd)

        def backward(g):
            return g, g

    elif ad.ndim == 2 and bd.ndim == 1 and ad.shape[1] == bd.shape[0]:
        out = Tensor(ad + bd)

        def backward(g):
            return g, g.sum(axis=0)

    else:
        raise ShapeError("add", ad.shape, bd.shape)
    return _emit("add", out, (a, b), backward)


def mul(a, b):
    """Elementwise product of same-shape tensors."""
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise ShapeError("mul", ad.shape, bd.shape)
    out = Tensor(ad * bd)

    def backward(g):
        return g * bd, g * ad

    return _emit("mul", out, (a, b), backward)


def sub(a, b):
    """a - b, composed from add and scale."""
    return add(a, scale(b, -1.0))


def scale(x, c):
    """Multiply by a python scalar constant."""
    c = float(c)
    out = Tensor(x.data * c)

    def backward(g):
        return (g * c,)

    return _emit("scale", out, (x,), backward)


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat", ())
    datas = [t.data for t in tensors]
    nd = datas[0].ndim
    for d in datas[1:]:
        if d.ndim != nd or any(
            i != axis and d.shape[i] != datas[0].shape[i] for i in range(nd)
        ):
            raise ShapeError("concat", *[d.shape for d in datas])
    out = Tensor(np.concatenate(datas, axis=axis))
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for i in range(len(sizes)):
            sl = [slice(None)] * nd
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _emit("concat", out, tensors, backward)


def stack(tensors):
    """Stack same-shape tensors along a new leading axis."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("stack", ())
    shape0 = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape0:
            raise ShapeError("stack", *[t.shape for t in tensors])
    out = Tensor(np.stack([t.data for t in tensors]))

    def backward(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _emit("stack", out, tensors, backward)


def take(x, key):
    """Basic (non-fancy) indexing; gradient scatters back into the source."""
    data = x.data[key]
    out = Tensor(np.array(data))
    shape = x.data.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[key] += g
        return (gx,)

    return _emit("take", out, (x,), backward)


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError("reshape", x.shape, shape)
    out = Tensor(x.data.reshape(shape))
    orig = x.data.shape

    def backward(g):
        return (g.reshape(orig),)

    return _emit("reshape", out, (x,), backward)


def tanh(x):
    out = Tensor(np.tanh(x.data))
    y = out.data

    def backward(g):
        return (g * (1.0 - y * y),)

    return _emit("tanh", out, (x,), backward)


def sigmoid(x):
    """Logistic function, computed in the saturation-safe branch form."""
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _emit("sigmoid", out, (x,), backward)


def softmax(x):
    """Softmax over the last axis, stabilized by max subtraction."""
    d = x.data
    if d.ndim not in (1, 2):
        raise ShapeError("softmax", d.shape)
    shifted = d - d.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)

    return _emit("softmax", out, (x,), backward)


def log(x):
    out = Tensor(np.log(x.data))
    d = x.data

    def backward(g):
        return (g / d,)

    return _emit("log", out, (x,), backward)


def reciprocal(x):
    out = Tensor(1.0 / x.data)
    d = x.data

    def backward(g):
        return (-g / (d * d),)

    return _emit("reciprocal", out, (x,), backward)


def tsum(x, axis=None):
    """Sum over all elements (0-d result) or along one axis."""
    out = Tensor(x.data.sum(axis=axis))
    shape = x.data.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", out, (x,), backward)


def embedding(table, ids):
    """Row lookup ``table[ids]``; gradients accumulate per row (repeats add)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding: id out of range [0, {table.shape[0]}): {ids.tolist()}"
        )
    out = Tensor(table.data[ids])
    shape = table.data.shape

    def backward(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit("embedding", out, (table,), backward)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    """Per-leaf max relative error of analytic vs central-difference grads."""

    per_leaf: dict = field(default_factory=dict)
    tolerance: float = 1e-4
    failure: str | None = None

    @property
    def max_rel_err(self):
        return max(self.per_leaf.values()) if self.per_leaf else 0.0

    @property
    def passed(self):
        return self.failure is None and self.max_rel_err < self.tolerance


def _rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-4)


def grad_check(builder, leaves, tolerance=1e-4, step=1e-5):
    """Compare tape gradients of ``builder()`` against central differences.

    ``builder`` must deterministically rebuild the scalar loss from the
    given leaf tensors (it is re-evaluated under perturbation, without a
    tape).  Any non-finite forward value or gradient fails the check with
    its location.
    """
    leaves = list(leaves)
    for leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        loss = builder()
        if loss.size != 1:
            raise ShapeError("grad_check", loss.shape)
        for node in tape.nodes:
            if not np.all(np.isfinite(node.out.data)):
                return GradCheckReport(
                    tolerance=tolerance,
                    failure=f"non-finite forward value in op {node.op!r}",
                )
        tape.backward(loss)

    report = GradCheckReport(tolerance=tolerance)
    for idx, leaf in enumerate(leaves):
        label = leaf.name or f"leaf{idx}"
        analytic = leaf.grad.copy()
        if not np.all(np.isfinite(analytic)):
            report.failure = f"non-finite gradient on {label}"
            return report
        worst = 0.0
        flat = leaf.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            f_plus = builder().item()
            flat[k] = orig - step
            f_minus = builder().item()
            flat[k] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                report.failure = f"non-finite perturbed loss at {label}[{k}]"
                return report
            numeric = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, _rel_err(analytic.reshape(-1)[k], numeric))
        report.per_leaf[label] = worst
    return report
