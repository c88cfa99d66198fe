"""Minimal dense-tensor reverse-mode differentiation engine.

Exactly the primitives the completion network needs, recorded on an
implicit tape (the operation graph) and replayed in reverse topological
order by :func:`backward`. A tape is single-threaded; distinct graphs may
live on distinct threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class Tensor:
    """Dense array node. Operations on tensors record backward rules."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not tensors")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def add_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def _node(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _shape_error(op, *tensors):
    shapes = ", ".join(str(t.shape) for t in tensors)
    return ValueError(f"{op}: incompatible shapes {shapes}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a, b)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.add_grad(g @ b.data.T)
        if b.requires_grad:
            b.add_grad(a.data.T @ g)

    return _node(out_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also supports a row-vector bias b of shape (d,)
    broadcast over the leading axes of a."""
    bias = b.data.ndim == 1 and a.data.ndim > 1 and a.shape[-1] == b.shape[0]
    if not bias and a.shape != b.shape:
        raise _shape_error("add", a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.add_grad(g)
        if b.requires_grad:
            if bias:
                b.add_grad(g.reshape(-1, g.shape[-1]).sum(axis=0))
            else:
                b.add_grad(g)

    return _node(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("sub", a, b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.add_grad(g)
        if b.requires_grad:
            b.add_grad(-g)

    return _node(out_data, (a, b), backward)


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        if a.requires_grad:
            a.add_grad(g * s)

    return _node(a.data * np.asarray(s, dtype=a.dtype), (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.add_grad(g[tuple(sl)])

    return _node(out_data, tensors, backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a.add_grad(g * (a.data > 0))

    return _node(out_data, (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.add_grad(g * (2.0 * a.data))

    return _node(a.data * a.data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a.add_grad(g / a.data)

    return _node(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    z = np.exp(-np.abs(x))  # bounded by 1: stable for large |x|
    out_data = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(a.dtype, copy=False)

    def backward(g):
        if a.requires_grad:
            a.add_grad(g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only through the interior."""
    out_data = np.clip(a.data, lo, hi)

    def backward(g):
        if a.requires_grad:
            a.add_grad(g * ((a.data > lo) & (a.data < hi)))

    return _node(out_data, (a,), backward)


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    out_data = a.data.sum(axis=axis)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a.add_grad(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))
            else:
                a.add_grad(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _node(out_data, (a,), backward)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    out_data = a.data.mean(axis=axis)

    def backward(g):
        if a.requires_grad:
            scaled = g / n
            if axis is None:
                a.add_grad(np.broadcast_to(scaled, a.shape).astype(a.dtype, copy=False))
            else:
                a.add_grad(np.broadcast_to(np.expand_dims(scaled, axis), a.shape))

    return _node(out_data, (a,), backward)


def reduce_max(a: Tensor, axis: int) -> Tensor:
    """Max along an axis; gradient routed only to the (first) argmax."""
    arg = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis).squeeze(axis)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
            a.add_grad(full)

    return _node(out_data, (a,), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    """out[..., :] = a[indices[...], :] for a 2-D tensor a; duplicate
    indices scatter-add their gradients back into the shared row."""
    if a.data.ndim != 2:
        raise _shape_error("gather_rows", a)
    idx = np.asarray(indices, dtype=np.int64)
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            _kernels.scatter_add_rows(acc, idx.reshape(-1), g.reshape(-1, a.shape[1]))
            a.add_grad(acc)

    return _node(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.add_grad(g.reshape(a.shape))

    return _node(out_data, (a,), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice a[start:stop] of a 2-D tensor."""
    if a.data.ndim != 2 or not 0 <= start <= stop <= a.shape[0]:
        raise _shape_error("slice_rows", a)
    out_data = a.data[start:stop]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            a.add_grad(full)

    return _node(out_data, (a,), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: "BatchNormState",
               training: bool, update_running: bool = True) -> Tensor:
    """Batch normalization over all axes but the last (feature) axis.

    Training uses per-batch statistics (biased variance) and, when
    update_running is set, folds them into the running averages. Inference
    normalizes with the running statistics, a pure affine map.
    """
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise _shape_error("batch_norm", x, gamma, beta)
    flat = x.data.reshape(-1, d)
    n = flat.shape[0]
    eps = state.eps

    if training:
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
        if update_running:
            m = state.momentum
            state.running_mean = m * state.running_mean + (1.0 - m) * mu
            state.running_var = m * state.running_var + (1.0 - m) * var
    else:
        mu = state.running_mean.astype(flat.dtype, copy=False)
        var = state.running_var.astype(flat.dtype, copy=False)

    istd = 1.0 / np.sqrt(var + eps)
    xhat = (flat - mu) * istd
    out_data = (gamma.data * xhat + beta.data).reshape(x.shape)

    def backward(g):
        gf = g.reshape(-1, d)
        if gamma.requires_grad:
            gamma.add_grad((gf * xhat).sum(axis=0))
        if beta.requires_grad:
            beta.add_grad(gf.sum(axis=0))
        if x.requires_grad:
            dxhat = gf * gamma.data
            if training:
                dx = (istd / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                dx = dxhat * istd
            x.add_grad(dx.reshape(x.shape).astype(x.dtype, copy=False))

    return _node(out_data, (x, gamma, beta), backward)


@dataclass
class BatchNormState:
    """Running statistics buffer for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, width: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(width, dtype=dtype), np.ones(width, dtype=dtype))


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss.

    Gradients accumulate into every requires_grad tensor reachable from
    the loss; the recorded graph is detached afterward.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.add_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
            node._backward = None
            node._parents = ()
            node.grad = None  # intermediate grads are transient


@dataclass
class AdamState:
    """Adam optimizer state for a fixed parameter list."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def create(cls, params, lr=1e-4) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params, grads, state: AdamState):
    """One Adam update with bias correction; modifies params in place.

    ``grads`` may be None to use each parameter's accumulated .grad
    (missing gradients count as zero). Fails fast on non-finite gradients.
    """
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ValueError("params/grads/state lengths do not match")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        if not np.isfinite(g).all():
            raise ValueError("non-finite gradient in adam_step")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grads(params):
    for p in params:
        p.zero_grad()


def grad_check(function, inputs, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``function`` maps the input tensors to a scalar Tensor and must rebuild
    its graph on every call. Relative error is |a - n| / (|a| + |n| + 1e-12).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    inputs = list(inputs)
    zero_grads(inputs)
    loss = function(inputs)
    backward(loss)
    analytic = [np.array(p.grad) if p.grad is not None else np.zeros_like(p.data) for p in inputs]

    worst = 0.0
    for tensor, ana in zip(inputs, analytic):
        flat = tensor.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = function(inputs).item()
            flat[i] = orig - h
            f_minus = function(inputs).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = ana_flat[i]
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            if err > worst:
                worst = err
    zero_grads(inputs)
    return worst
