"""Dense tensor with reverse-mode differentiation on top of numpy.

Design notes:

* A ``Tensor`` wraps a numpy array (float32 for training, float64 for
  verification) plus an optional gradient buffer. Tensors are immutable
  after creation except for gradient accumulation.
* Every op that touches a gradient-requiring tensor appends a record to
  an implicit tape (the ``_parents``/``_backward`` closure chain).
  Execution order is a topological order by construction, so
  ``backward`` replays the records in reverse, visiting each exactly
  once and accumulating gradients additively.
* Masked attention logits use a large negative sentinel instead of
  ``-inf`` so that every forward output stays finite (the engine treats
  NaN/Inf as an error state). ``exp`` underflows the sentinel to an
  exact 0.0, so masked keys still contribute exactly nothing.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "apply_op",
    "OP_REGISTRY",
    "backward",
    "no_grad",
    "grad_enabled",
    "finite_difference_check",
    "MASK_FILL_VALUE",
    "matmul",
    "add",
    "mul",
    "scale",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "layer_norm",
    "mean",
    "tsum",
    "concat",
    "take",
    "pick",
    "slice_",
    "masked_fill",
    "transpose",
    "reshape",
    "embedding",
    "gelu",
    "permute_rows",
]

MASK_FILL_VALUE = -1e9

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense n-dimensional array with optional gradient."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def grad(self):
        if not self.requires_grad:
            raise RuntimeError(
                "gradient queried on a tensor that does not require grad "
                f"(op={self._op!r}, shape={self.shape})"
            )
        return self._grad

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self._grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self._grad is None:
            self._grad = g.astype(self.data.dtype, copy=True)
        else:
            self._grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op!r})"

    # -- operator sugar -----------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, scale(_coerce(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _finite_or_raise(out: np.ndarray, op: str, parents) -> None:
    # fast path: one reduction; a finite array can only fail it by overflow
    # of the sum itself, so confirm with the exact check before raising
    if not np.isfinite(out.sum()) and not np.all(np.isfinite(out)):
        shapes = [p.shape for p in parents]
        raise NonFiniteError(f"op {op!r} produced non-finite values (input shapes {shapes})")


def _make(out_data, op: str, parents, backward_fn, check: bool = True) -> Tensor:
    # value-preserving ops (reshape, transpose, gather, concat, masked fill)
    # skip the finite check: their inputs were already validated on creation
    if check:
        _finite_or_raise(out_data, op, parents)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out._grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum-reduce ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- ops ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(out, "add", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(out, "mul", (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def bwd(g):
        return (g * c,)

    return _make(out, "scale", (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: inputs must be >=2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, "matmul", (a, b), bwd)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _make(out, "exp", (a,), bwd)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _make(out, "log", (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, "softmax", (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out = s - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (a,), bwd)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = (x - mu) * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return _make(out, "layer_norm", (a,), bwd)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    out = a.data.mean(axis=ax, keepdims=keepdims)
    n = a.size if ax is None else int(np.prod([a.shape[i] for i in ax]))

    def bwd(g):
        g = np.asarray(g)
        if not keepdims and ax is not None:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape) / n,)

    return _make(np.asarray(out), "mean", (a,), bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if not keepdims and ax is not None:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), "sum", (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, "concat", tuple(tensors), bwd, check=False)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather rows/slices along ``axis`` by a 1-D integer index array."""
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise ShapeError(f"take: indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise ShapeError(f"take: index out of range for axis {axis} of shape {a.shape}")
    out = np.take(a.data, idx, axis=axis)

    def bwd(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return _make(out, "gather", (a,), bwd, check=False)


def permute_rows(a: Tensor, perm) -> Tensor:
    """Reorder axis-0 rows by a permutation (bijective gather)."""
    perm = np.asarray(perm)
    if perm.shape != (a.shape[0],):
        raise ShapeError(f"permute_rows: permutation length {perm.shape} != {a.shape[0]} rows")
    inv = np.argsort(perm)
    out = a.data[perm]

    def bwd(g):
        return (g[inv],)

    return _make(out, "permute_rows", (a,), bwd, check=False)


def pick(a: Tensor, indices) -> Tensor:
    """Select one entry per row of a 2-D tensor: out[i] = a[i, idx[i]]."""
    if a.ndim != 2:
        raise ShapeError(f"pick: expected 2-D input, got {a.shape}")
    idx = np.asarray(indices)
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"pick: index shape {idx.shape} != ({a.shape[0]},)")
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return _make(out, "pick", (a,), bwd, check=False)


def slice_(a: Tensor, slices) -> Tensor:
    """Basic slicing; ``slices`` is a tuple of python slice objects/ints."""
    out = a.data[slices]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[slices] = g
        return (ga,)

    return _make(np.ascontiguousarray(out), "slice", (a,), bwd, check=False)


def masked_fill(a: Tensor, mask, value: float = MASK_FILL_VALUE) -> Tensor:
    """Replace entries where ``mask`` is True by a constant."""
    m = np.asarray(mask, dtype=bool)
    try:
        m_b = np.broadcast_to(m, a.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: mask {m.shape} does not broadcast to {a.shape}") from None
    out = np.where(m_b, a.dtype.type(value), a.data)

    def bwd(g):
        return (np.where(m_b, 0.0, g),)

    return _make(out, "masked_fill", (a,), bwd, check=False)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _make(out, "transpose", (a,), bwd, check=False)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make(out, "reshape", (a,), bwd, check=False)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup into an embedding table (gather on axis 0)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: id out of range [0, {weight.shape[0]})")
    out = weight.data[ids]

    def bwd(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return _make(out, "embedding", (weight,), bwd, check=False)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation gelu (the GPT-2/BERT variant)."""
    x = a.data
    u = _GELU_C * (x + _GELU_K * x * x * x)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)
    du = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
    local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du

    def bwd(g):
        return (g * local,)

    return _make(out, "gelu", (a,), bwd)


OP_REGISTRY = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "mean": mean,
    "sum": tsum,
    "concat": concat,
    "gather": take,
    "pick": pick,
    "slice": slice_,
    "masked_fill": masked_fill,
    "transpose": transpose,
    "reshape": reshape,
    "embedding": embedding,
    "gelu": gelu,
    "permute_rows": permute_rows,
}


def apply_op(kind: str, inputs, **attrs) -> Tensor:
    """Dispatch an op by name; ``inputs`` is a list of Tensors."""
    if kind not in OP_REGISTRY:
        raise KeyError(f"unknown op kind {kind!r}")
    fn = OP_REGISTRY[kind]
    if kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# -- reverse pass -------------------------------------------------------


def backward(loss: Tensor):
    """Reverse-mode pass from a scalar loss.

    Populates ``.grad`` on every gradient-requiring leaf reachable from
    ``loss`` and returns a ``{tensor: gradient array}`` map over those
    leaves. Gradients accumulate additively across calls until
    ``zero_grad``.
    """
    if loss.ndim != 0 and loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not require grad (detached graph?)")

    # Iterative topological sort; training graphs are too deep for recursion.
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.accumulate_grad(g)
            leaves[node] = node._grad
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return leaves


# -- verification oracle -------------------------------------------------


def finite_difference_check(f, inputs, eps: float = 1e-5, sample: int | None = None, seed: int = 0,
                            select: str = "random") -> float:
    """Compare reverse-mode gradients with central differences.

    ``f`` maps the input tensors to a scalar Tensor. Inputs should be
    float64. Returns the worst relative error over all checked elements,
    with denominator ``max(|a|, |b|, 1e-8)``. ``sample`` limits the
    number of perturbed elements per input; default checks every element.
    ``select`` picks the sampled coordinates: "random" (seeded choice) or
    "largest" (the top-|gradient| coordinates per input). For deep
    composite losses the "largest" rule is the meaningful one: coordinates
    whose true derivative sits below the central-difference rounding floor
    (|f| * machine-eps / 2 eps, about 1e-11 for unit-scale losses) measure
    only noise, while the large coordinates of the same tensor exercise the
    identical backward path.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("finite_difference_check requires float64 inputs")

    for t in inputs:
        t.zero_grad()
    loss = f(*inputs)
    if loss.ndim != 0 and loss.size != 1:
        raise ValueError("finite_difference_check: f must return a scalar")
    backward(loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        n = t.data.size
        ga = analytic.reshape(-1)
        if sample is None or sample >= n:
            idxs = np.arange(n)
        elif select == "largest":
            idxs = np.argsort(np.abs(ga))[-sample:]
        else:
            idxs = rng.choice(n, size=sample, replace=False)
        for i in idxs:
            multi = np.unravel_index(i, t.data.shape)
            orig = t.data[multi]
            t.data[multi] = orig + eps
            with no_grad():
                hi = float(f(*inputs).data)
            t.data[multi] = orig - eps
            with no_grad():
                lo = float(f(*inputs).data)
            t.data[multi] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteError("finite_difference_check: perturbed evaluation is non-finite")
            fd = (hi - lo) / (2.0 * eps)
            denom = max(abs(fd), abs(ga[i]), 1e-8)
            err = abs(fd - ga[i]) / denom
            if err > worst:
                worst = err
    return worst
