"""Dense float64 tensors with a define-by-run reverse-mode tape.

The graph is implicit: each op records its parents and a backward closure
on the output tensor. ``Tensor.backward()`` runs the closures in reverse
topological order and accumulates gradients on every node that requires
them. The tape is rebuilt on every forward pass.
"""

from contextlib import contextmanager

import numpy as np

from .errors import InvalidShape, NotScalar, ShapeMismatch

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, op={self._op})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)  # own copy; g may be a view
        else:
            self.grad += g

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def reshape(self, shape):
        return reshape(self, shape)

    # -- backward ------------------------------------------------------

    def backward(self):
        """Backpropagate from a scalar node, accumulating into ``.grad``."""
        if self.data.size != 1:
            raise NotScalar(f"backward from non-scalar shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node_, processed = stack.pop()
            if processed:
                topo.append(node_)
                continue
            if id(node_) in visited:
                continue
            visited.add(id(node_))
            stack.append((node_, True))
            for p in node_._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node_ in reversed(topo):
            if node_._backward is not None:
                node_._backward()


def _validate_shape(shape):
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0:
        raise InvalidShape("empty shape")
    if any(d < 1 for d in shape):
        raise InvalidShape(f"non-positive dim in {shape}")
    return shape


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(_validate_shape(shape)), requires_grad)


def constant(shape, value, requires_grad=False):
    return Tensor(np.full(_validate_shape(shape), float(value)), requires_grad)


def fan_in_gaussian(shape, seed, requires_grad=False):
    """He-style init: N(0, 2/fan_in), deterministic in the seed."""
    shape = _validate_shape(shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad)


def node(data, parents, backward_fn, op=""):
    """Record an op result on the tape (no-op inside ``no_grad``)."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn(out)
        out._op = op
    return out


def _as_pair(a, b, opname):
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ShapeMismatch(f"{opname}: {a.data.shape} vs {b.data.shape}")
        return b, False
    return Tensor(np.full_like(a.data, float(b))), True


def add(a, b):
    b, _ = _as_pair(a, b, "add")

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(out.grad)
            if b.requires_grad:
                b._accum(out.grad)
        return run

    return node(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    b, _ = _as_pair(a, b, "sub")

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(out.grad)
            if b.requires_grad:
                b._accum(-out.grad)
        return run

    return node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    b, _ = _as_pair(a, b, "mul")

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(b.data * out.grad)
            if b.requires_grad:
                b._accum(a.data * out.grad)
        return run

    return node(a.data * b.data, (a, b), bw, "mul")


def relu(a):
    mask = a.data > 0  # subgradient 0 at exactly 0

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(mask * out.grad)
        return run

    return node(np.where(mask, a.data, 0.0), (a,), bw, "relu")


def abs_(a):
    sign = np.sign(a.data)  # 0 at exactly 0

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(sign * out.grad)
        return run

    return node(np.abs(a.data), (a,), bw, "abs")


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul needs rank 2, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul inner dims: {a.data.shape} @ {b.data.shape}")

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(out.grad @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ out.grad)
        return run

    return node(a.data @ b.data, (a, b), bw, "matmul")


def reshape(a, shape):
    shape = _validate_shape(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeMismatch(f"reshape {a.data.shape} -> {shape}")
    old = a.data.shape

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(out.grad.reshape(old))
        return run

    return node(a.data.reshape(shape), (a,), bw, "reshape")


def concat(tensors, axis):
    if not tensors:
        raise ShapeMismatch("concat of nothing")
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(
            i != axis and s[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeMismatch(f"concat: {ref} vs {s} on axis {axis}")
    widths = [t.data.shape[axis] for t in tensors]
    edges = np.cumsum([0] + widths)

    def bw(out):
        def run():
            for t, lo, hi in zip(tensors, edges[:-1], edges[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(lo, hi)
                    t._accum(out.grad[tuple(sl)])
        return run

    return node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def reduce_mean(a):
    """Mean over all elements -> scalar tensor (shape ())."""
    n = a.data.size

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(np.full_like(a.data, out.grad / n))
        return run

    return node(np.mean(a.data), (a,), bw, "reduce_mean")


def spatial_mean(a):
    """[B,C,H,W] -> [B,C], per-channel mean over the spatial dims."""
    if a.data.ndim != 4:
        raise ShapeMismatch(f"spatial_mean needs [B,C,H,W], got {a.data.shape}")
    n = a.data.shape[2] * a.data.shape[3]

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(np.broadcast_to(out.grad[:, :, None, None] / n, a.data.shape))
        return run

    return node(a.data.mean(axis=(2, 3)), (a,), bw, "spatial_mean")


def gradients(loss, leaves):
    """Backward pass returning one gradient per leaf; unreachable leaves get zeros."""
    loss.backward()
    return [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        for leaf in leaves
    ]
