"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records a node on the active ``Tape`` when one of its inputs
requires a gradient. Adjoints are themselves written with the primitives in
this module, so ``grad(..., create_graph=True)`` yields tensors that can be
differentiated again (exact MAML meta-gradients).

Broadcasting is limited to scalar-times-tensor (``scale``); every other
shape alignment is explicit.
"""

import logging
import os
import struct
import threading
from contextlib import contextmanager, nullcontext

import numpy as np

from metasampler.errors import ContractViolation, FormatError, TensorIndexError

logger = logging.getLogger(__name__)

DEBUG = os.environ.get("METASAMPLER_DEBUG", "") == "1"

_TSR_MAGIC = b"TSR1"

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = [Tape()]
        _state.tapes = stack
    return stack


def active_tape():
    """Return the tape new nodes are recorded on in this thread."""
    return _tape_stack()[-1]


@contextmanager
def no_grad():
    """Disable recording of new nodes inside the block."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tape:
    """Ordered record of executed primitives.

    Used as a context manager it becomes the active tape of the current
    thread, so the nodes of one training step are released when the block
    exits.
    """

    def __init__(self):
        self.nodes = []

    def record(self, node):
        node.index = len(self.nodes)
        node.tape = self
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp", "index", "tape")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.index = -1
        self.tape = None


class Tensor:
    """An n-dimensional float64 value, optionally tracked for gradients.

    Attributes:
        data: numpy float64 array.
        requires_grad: Whether gradients flow to this tensor.
        grad: numpy array of the same shape, set by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
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

    @property
    def is_leaf(self):
        return self._node is None

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def detach(self):
        """Return a new leaf sharing no history (data is copied)."""
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, as_tensor(other, self.shape))

    def __radd__(self, other):
        return add(as_tensor(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other, self.shape))

    def __rsub__(self, other):
        return sub(as_tensor(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value, shape=None):
    """Wrap a number or array as a constant tensor.

    A Python scalar is filled to ``shape`` when given, which keeps operator
    sugar like ``1.0 - s`` explicit about its shape.
    """
    if isinstance(value, Tensor):
        return value
    if shape is not None and np.ndim(value) == 0:
        return Tensor(np.full(shape, float(value)))
    return Tensor(value)


def ones(shape):
    return Tensor(np.ones(shape))


def zeros(shape):
    return Tensor(np.zeros(shape))


def _record(op, data, inputs, vjp):
    if DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{op}: non-finite output from finite inputs")
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(op, tuple(inputs), out, vjp)
        active_tape().record(node)
        out._node = node
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ContractViolation(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _expand(g, shape, axis):
    """Broadcast a reduction result ``g`` back to ``shape`` with primitives."""
    if axis is None or len(shape) == 1:
        return scale(ones(shape), reshape(g, ()))
    rows, cols = shape
    if axis == 0:
        return matmul(ones((rows, 1)), reshape(g, (1, cols)))
    return matmul(reshape(g, (rows, 1)), ones((1, cols)))


def _norm_axis(op, tensor, axis):
    if axis is None:
        return None
    if tensor.ndim not in (1, 2):
        raise ContractViolation(f"{op}: axis reductions need rank 1 or 2, got {tensor.shape}")
    axis = axis % tensor.ndim
    if tensor.ndim == 1:
        return None
    return axis


# ── Elementwise ─────────────────────────────────────────────────────────────


def add(a, b):
    _same_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g, out: (g, g))


def sub(a, b):
    _same_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g, out: (g, neg(g)))


def mul(a, b):
    """Elementwise product; a size-1 rank-0 operand is treated as a scalar."""
    if b.ndim == 0 and a.ndim != 0:
        return scale(a, b)
    if a.ndim == 0 and b.ndim != 0:
        return scale(b, a)
    _same_shape("mul", a, b)
    return _record("mul", a.data * b.data, (a, b), lambda g, out: (mul(g, b), mul(g, a)))


def scale(a, s):
    """Multiply ``a`` by a Python float or a rank-0 tensor."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ContractViolation(f"scale: scalar operand must have size 1, got {s.shape}")
        s0 = reshape(s, ()) if s.shape != () else s

        def vjp(g, out):
            return scale(g, s0), reshape(sum(mul(g, a)), s.shape)

        return _record("scale", a.data * s.data.reshape(()), (a, s), vjp)
    s = float(s)
    return _record("scale", a.data * s, (a,), lambda g, out: (scale(g, s),))


def neg(a):
    return _record("neg", -a.data, (a,), lambda g, out: (neg(g),))


def relu(a):
    mask = (a.data > 0).astype(np.float64)
    return _record("relu", a.data * mask, (a,), lambda g, out: (mul(g, Tensor(mask)),))


def exp(a):
    return _record("exp", np.exp(a.data), (a,), lambda g, out: (mul(g, out),))


def log(a):
    # d log(a) = 1/a = exp(-log(a))
    return _record("log", np.log(a.data), (a,), lambda g, out: (mul(g, exp(neg(out))),))


def square(a):
    return _record("square", a.data * a.data, (a,), lambda g, out: (scale(mul(g, a), 2.0),))


def sqrt(a):
    def vjp(g, out):
        return (scale(mul(g, exp(neg(log(out)))), 0.5),)

    return _record("sqrt", np.sqrt(a.data), (a,), vjp)


def sin(a):
    return _record("sin", np.sin(a.data), (a,), lambda g, out: (mul(g, cos(a)),))


def cos(a):
    return _record("cos", np.cos(a.data), (a,), lambda g, out: (neg(mul(g, sin(a))),))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    mask = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
    return _record("clip", np.clip(a.data, lo, hi), (a,), lambda g, out: (mul(g, Tensor(mask)),))


# ── Structural ──────────────────────────────────────────────────────────────


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ContractViolation(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g, out: (reshape(g, src),))


def transpose(a):
    if a.ndim != 2:
        raise ContractViolation(f"transpose: needs rank 2, got {a.shape}")
    return _record("transpose", a.data.T.copy(), (a,), lambda g, out: (transpose(g),))


def _selector(total, start, stop):
    sel = np.zeros((stop - start, total))
    sel[np.arange(stop - start), np.arange(start, stop)] = 1.0
    return Tensor(sel)


def concat(tensors, axis=0):
    """Concatenate rank-1 or rank-2 tensors along ``axis``."""
    tensors = list(tensors)
    if not tensors:
        raise ContractViolation("concat: no inputs")
    ndim = tensors[0].ndim
    if ndim not in (1, 2) or any(t.ndim != ndim for t in tensors):
        raise ContractViolation(f"concat: inputs must share rank 1 or 2, got {[t.shape for t in tensors]}")
    axis = axis % ndim
    for t in tensors[1:]:
        other = [d for i, d in enumerate(t.shape) if i != axis]
        first = [d for i, d in enumerate(tensors[0].shape) if i != axis]
        if other != first:
            raise ContractViolation(f"concat: shape mismatch {tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    total = int(np.sum(sizes))
    bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    def vjp(g, out):
        grads = []
        for i in range(len(tensors)):
            sel = _selector(total, bounds[i], bounds[i + 1])
            if ndim == 1:
                piece = reshape(matmul(reshape(g, (1, total)), transpose(sel)), (sizes[i],))
            elif axis == 0:
                piece = matmul(sel, g)
            else:
                piece = matmul(g, transpose(sel))
            grads.append(piece)
        return tuple(grads)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _record("concat", data, tensors, vjp)


def gather(a, index):
    """Select rows of a rank-2 tensor (or entries of a rank-1 tensor)."""
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if a.ndim not in (1, 2):
        raise ContractViolation(f"gather: needs rank 1 or 2, got {a.shape}")
    rows = a.shape[0]
    if index.size and (index.min() < 0 or index.max() >= rows):
        raise TensorIndexError(f"gather: index out of range for {rows} rows")
    picker = np.zeros((index.size, rows))
    picker[np.arange(index.size), index] = 1.0
    scatter = Tensor(picker.T)

    def vjp(g, out):
        if a.ndim == 1:
            return (reshape(matmul(scatter, reshape(g, (index.size, 1))), (rows,)),)
        return (matmul(scatter, g),)

    return _record("gather", a.data[index], (a,), vjp)


# ── Linear algebra ──────────────────────────────────────────────────────────


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def vjp(g, out):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _record("matmul", a.data @ b.data, (a, b), vjp)


def pairwise_sq_dist(a, b):
    """Squared Euclidean distance matrix between the rows of ``a`` and ``b``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractViolation(f"pairwise_sq_dist: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    dims = a.shape[1]

    def vjp(g, out):
        row = mul(_expand(sum(g, axis=1), (a.shape[0], dims), axis=1), a)
        col = mul(_expand(sum(g, axis=0), (b.shape[0], dims), axis=1), b)
        grad_a = scale(sub(row, matmul(g, b)), 2.0)
        grad_b = scale(sub(col, matmul(transpose(g), a)), 2.0)
        return grad_a, grad_b

    return _record("pairwise_sq_dist", np.einsum("ijk,ijk->ij", diff, diff), (a, b), vjp)


# ── Reductions ──────────────────────────────────────────────────────────────


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    axis = _norm_axis("sum", a, axis)
    shape = a.shape
    data = np.sum(a.data) if axis is None else np.sum(a.data, axis=axis)
    return _record("sum", data, (a,), lambda g, out: (_expand(g, shape, axis),))


def mean(a, axis=None):
    axis_n = _norm_axis("mean", a, axis)
    count = a.size if axis_n is None else a.shape[axis_n]
    return scale(sum(a, axis), 1.0 / count)


def _extreme(op, a, axis, pick):
    axis = _norm_axis(op, a, axis)
    shape = a.shape
    mask = np.zeros(shape)
    if axis is None:
        idx = int(pick(a.data.reshape(-1)))
        mask.reshape(-1)[idx] = 1.0
        data = a.data.reshape(-1)[idx]
    else:
        idx = pick(a.data, axis=axis)
        if axis == 0:
            mask[idx, np.arange(shape[1])] = 1.0
            data = a.data[idx, np.arange(shape[1])]
        else:
            mask[np.arange(shape[0]), idx] = 1.0
            data = a.data[np.arange(shape[0]), idx]
    const = Tensor(mask)
    out = _record(op, data, (a,), lambda g, out: (mul(_expand(g, shape, axis), const),))
    return out, idx


def max(a, axis=None):  # noqa: A001
    """Maximum along ``axis``; returns ``(value, argindex)``, ties to lowest index."""
    return _extreme("max", a, axis, np.argmax)


def min(a, axis=None):  # noqa: A001
    """Minimum along ``axis``; returns ``(value, argindex)``, ties to lowest index."""
    return _extreme("min", a, axis, np.argmin)


def softmax(a):
    """Softmax along the last axis of a rank-1 or rank-2 tensor."""
    if a.ndim not in (1, 2):
        raise ContractViolation(f"softmax: needs rank 1 or 2, got {a.shape}")
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=-1, keepdims=True)
    last = a.ndim - 1

    def vjp(g, out):
        inner = sum(mul(g, out), axis=last)
        return (mul(out, sub(g, _expand(inner, a.shape, last))),)

    return _record("softmax", data, (a,), vjp)


def sigmoid(a):
    """Logistic function, built as a two-way softmax against a zero logit."""
    count = a.size
    column = reshape(a, (count, 1))
    pair = softmax(concat([zeros((count, 1)), column], axis=1))
    picked = matmul(pair, Tensor([[0.0], [1.0]]))
    return reshape(picked, a.shape)


def absolute(a):
    """|a| as relu(a) + relu(-a); the derivative at 0 is taken as 0."""
    return add(relu(a), relu(neg(a)))


# ── Differentiation ─────────────────────────────────────────────────────────


def _propagate(root, create_graph, keep_ids=()):
    if root.size != 1:
        raise ContractViolation(f"backward: root must be scalar, got shape {root.shape}")
    node = root._node
    if node is None or node.tape is not active_tape():
        raise ContractViolation("backward: root is not on the active tape")
    keep_ids = set(keep_ids)
    grads = {id(root): ones(root.shape)}
    tensors = {id(root): root}
    context = nullcontext() if create_graph else no_grad()
    with context:
        for current in reversed(node.tape.nodes[: node.index + 1]):
            key = id(current.output)
            g = grads.get(key) if key in keep_ids else grads.pop(key, None)
            if g is None:
                continue
            for tensor, gi in zip(current.inputs, current.vjp(g, current.output)):
                if gi is None or not tensor.requires_grad:
                    continue
                prev = grads.get(id(tensor))
                grads[id(tensor)] = gi if prev is None else add(prev, gi)
                tensors[id(tensor)] = tensor
    return grads, tensors


def backward(root):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Args:
        root: Scalar tensor recorded on the active tape.

    Raises:
        ContractViolation: If ``root`` is not scalar or not on the active tape.
    """
    grads, tensors = _propagate(root, create_graph=False)
    for key, g in grads.items():
        tensor = tensors[key]
        if not tensor.is_leaf:
            continue
        tensor.grad = g.data.copy() if tensor.grad is None else tensor.grad + g.data


def grad(root, inputs, create_graph=False):
    """Return d(root)/d(input) for each input as tensors.

    Args:
        root: Scalar tensor recorded on the active tape.
        inputs: Sequence of tensors (leaves or intermediate results).
        create_graph: Record the adjoint computation so the returned
            gradients can themselves be differentiated.

    Returns:
        List of tensors shaped like ``inputs``; zeros where unreachable.
    """
    inputs = list(inputs)
    grads, _ = _propagate(root, create_graph, keep_ids=[id(t) for t in inputs])
    return [grads.get(id(t), zeros(t.shape)) for t in inputs]


def grad_check(f, x, eps=1e-6, floor=1e-12):
    """Compare the analytic gradient of ``f`` at ``x`` with central differences.

    Args:
        f: Function mapping a tensor to a scalar tensor.
        x: Tensor or array at which to evaluate.
        eps: Finite-difference step.
        floor: Added to the numeric magnitude in the relative error.

    Returns:
        Max over coordinates of |analytic - numeric| / (|numeric| + floor).
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with Tape():
        point = Tensor(base.copy(), requires_grad=True)
        analytic = grad(f(point), [point])[0].data.reshape(-1)

    numeric = np.zeros(base.size)
    with no_grad():
        for i in range(base.size):
            plus = base.copy().reshape(-1)
            minus = base.copy().reshape(-1)
            plus[i] += eps
            minus[i] -= eps
            hi = f(Tensor(plus.reshape(base.shape))).item()
            lo = f(Tensor(minus.reshape(base.shape))).item()
            numeric[i] = (hi - lo) / (2.0 * eps)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + floor)))


# ── Serialization ───────────────────────────────────────────────────────────


def tensor_to_bytes(tensor):
    """Encode as TSR1: magic, u32 rank, u32 dims, f64 data (little-endian)."""
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=np.float64)
    header = _TSR_MAGIC + struct.pack("<I", data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    return header + data.astype("<f8").tobytes(order="C")


def tensor_from_bytes(buf, offset=0):
    """Decode one TSR1 record.

    Returns:
        Tuple of (Tensor, offset just past the record).

    Raises:
        FormatError: On a bad magic or truncated buffer.
    """
    if buf[offset:offset + 4] != _TSR_MAGIC:
        raise FormatError("TSR1: bad magic")
    try:
        (rank,) = struct.unpack_from("<I", buf, offset + 4)
        dims = struct.unpack_from(f"<{rank}I", buf, offset + 8)
    except struct.error as exc:
        raise FormatError(f"TSR1: truncated header ({exc})") from exc
    start = offset + 8 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    end = start + 8 * count
    if end > len(buf):
        raise FormatError("TSR1: truncated data")
    data = np.frombuffer(buf[start:end], dtype="<f8").astype(np.float64).reshape(dims)
    return Tensor(data), end
