"""Minimal reverse-mode tensor engine.

Covers exactly the operator set the models need: 1D convolution, subpixel
shuffling, pointwise activations, concatenation, reductions, and the losses.
Backward functions are themselves built from these operators, so a second
backward pass (needed for the critic's gradient penalty) falls out of the same
tape. Dropout is the one exception: its backward is detached, so it cannot sit
on a double-differentiated path.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_grad_enabled = True


class GraphError(ValueError):
    """Malformed differentiation request (non-scalar root, detached input, ...)."""


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class _enable_grad:
    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = True
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Real-valued array node in a dynamically recorded computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op", "_double_ok")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._op = "leaf"
        self._double_ok = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{flag})"


def _as_tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(v)


def _pair(x, y) -> tuple[Tensor, Tensor]:
    """Coerce operands; bare Python scalars adopt the tensor operand's dtype."""
    if isinstance(x, Tensor) and not isinstance(y, Tensor) and np.isscalar(y):
        y = Tensor(np.asarray(y, dtype=x.data.dtype))
    elif isinstance(y, Tensor) and not isinstance(x, Tensor) and np.isscalar(x):
        x = Tensor(np.asarray(x, dtype=y.data.dtype))
    return _as_tensor(x), _as_tensor(y)


def _from_op(data, parents, vjp, op: str, double_ok: bool = True) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
        out._double_ok = double_ok
    return out


# ---------------------------------------------------------------------------
# elementwise / shape primitives
# ---------------------------------------------------------------------------

def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, d in enumerate(shape) if d == 1 and g.shape[i + extra] != 1
    )
    out = sum_axes(g, axes) if axes else g
    return reshape(out, shape)


def add(x, y) -> Tensor:
    x, y = _pair(x, y)
    def vjp(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)
    return _from_op(x.data + y.data, (x, y), vjp, "add")


def neg(x) -> Tensor:
    x = _as_tensor(x)
    def vjp(g):
        return (neg(g),)
    return _from_op(-x.data, (x,), vjp, "neg")


def sub(x, y) -> Tensor:
    return add(x, neg(y))


def mul(x, y) -> Tensor:
    x, y = _pair(x, y)
    def vjp(g):
        return _unbroadcast(mul(g, y), x.shape), _unbroadcast(mul(g, x), y.shape)
    return _from_op(x.data * y.data, (x, y), vjp, "mul")


def pow_const(x, p: float) -> Tensor:
    """x ** p for a constant real exponent."""
    x = _as_tensor(x)
    def vjp(g):
        return (mul(g, mul(p, pow_const(x, p - 1.0))),)
    return _from_op(x.data**p, (x,), vjp, "pow_const")


def sqrt(x) -> Tensor:
    return pow_const(x, 0.5)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    def vjp(g):
        return (reshape(g, old),)
    return _from_op(x.data.reshape(shape), (x,), vjp, "reshape")


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    inv = tuple(np.argsort(axes))
    def vjp(g):
        return (transpose(g, inv),)
    return _from_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), vjp, "transpose")


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    def vjp(g):
        return (_unbroadcast(g, x.shape),)
    return _from_op(np.broadcast_to(x.data, shape).copy(), (x,), vjp, "broadcast_to")


def sum_axes(x, axes, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes) if not isinstance(axes, int) else (axes,)
    kept = tuple(1 if i in axes else d for i, d in enumerate(x.shape))
    def vjp(g):
        gg = g if keepdims else reshape(g, kept)
        return (broadcast_to(gg, x.shape),)
    return _from_op(x.data.sum(axis=axes, keepdims=keepdims), (x,), vjp, "sum_axes")


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    def vjp(g):
        return (broadcast_to(g, x.shape),)
    return _from_op(x.data.sum(), (x,), vjp, "sum_all")


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    return mul(sum_all(x), 1.0 / x.size)


def absolute(x) -> Tensor:
    x = _as_tensor(x)
    sign = np.sign(x.data)
    def vjp(g):
        return (mul(g, Tensor(sign)),)
    return _from_op(np.abs(x.data), (x,), vjp, "abs")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = (x.data > 0).astype(x.data.dtype)
    def vjp(g):
        return (mul(g, Tensor(mask)),)
    return _from_op(x.data * mask, (x,), vjp, "relu")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    factor = np.where(x.data > 0, x.data.dtype.type(1.0), x.data.dtype.type(slope))
    def vjp(g):
        return (mul(g, Tensor(factor)),)
    return _from_op(x.data * factor, (x,), vjp, "leaky_relu")


def dropout(x, rate: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Inverted dropout; identity in eval mode and at rate 0.

    Backward is detached, so dropout cannot appear on a double-backward path.
    """
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    def vjp(g):
        return (Tensor(g.data * mask),)
    return _from_op(x.data * mask, (x,), vjp, "dropout", double_ok=False)


# ---------------------------------------------------------------------------
# structural primitives: pad / slice / concat / gather
# ---------------------------------------------------------------------------

def pad_axis(x, axis: int, before: int, after: int) -> Tensor:
    x = _as_tensor(x)
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    length = x.shape[axis]
    def vjp(g):
        return (slice_axis(g, axis, before, length),)
    return _from_op(np.pad(x.data, widths), (x,), vjp, "pad")


def slice_axis(x, axis: int, start: int, length: int) -> Tensor:
    x = _as_tensor(x)
    total = x.shape[axis]
    if start < 0 or start + length > total:
        raise ValueError(f"slice [{start}:{start + length}] out of range for axis size {total}")
    sl = tuple(slice(start, start + length) if i == axis else slice(None) for i in range(x.ndim))
    def vjp(g):
        return (pad_axis(g, axis, start, total - start - length),)
    return _from_op(x.data[sl].copy(), (x,), vjp, "slice")


def slice_time(x, start: int, length: int) -> Tensor:
    return slice_axis(x, 2, start, length)


def slice_channels(x, start: int, count: int) -> Tensor:
    return slice_axis(x, 1, start, count)


def concat_channels(x, y) -> Tensor:
    """Channel concatenation, x's channels first."""
    x, y = _as_tensor(x), _as_tensor(y)
    if x.ndim != 3 or y.ndim != 3:
        raise ValueError("concat_channels expects rank-3 tensors")
    if x.shape[0] != y.shape[0] or x.shape[2] != y.shape[2]:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape} (batch/length must agree)")
    cx, cy = x.shape[1], y.shape[1]
    def vjp(g):
        return slice_channels(g, 0, cx), slice_channels(g, cx, cy)
    return _from_op(np.concatenate([x.data, y.data], axis=1), (x, y), vjp, "concat")


def take_time(x, idx: np.ndarray) -> Tensor:
    """Gather along the time axis with a per-batch index map (b, T)."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ValueError(f"index map {idx.shape} incompatible with tensor {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[2]):
        raise ValueError("time indices out of range")
    length = x.shape[2]
    def vjp(g):
        return (_put_time(g, idx, length),)
    return _from_op(np.take_along_axis(x.data, idx[:, None, :], axis=2), (x,), vjp, "take_time")


def _put_time(g, idx: np.ndarray, length: int) -> Tensor:
    g = _as_tensor(g)
    b, c, _ = g.shape
    out = np.zeros((b, c, length), dtype=g.data.dtype)
    np.add.at(
        out,
        (np.arange(b)[:, None, None], np.arange(c)[None, :, None], idx[:, None, :]),
        g.data,
    )
    def vjp(gg):
        return (take_time(gg, idx),)
    return _from_op(out, (g,), vjp, "put_time")


# ---------------------------------------------------------------------------
# convolution via unfold + contraction
# ---------------------------------------------------------------------------

def _unfold(x, k: int, stride: int) -> Tensor:
    """(b, c, L) -> (b, c, W, k) sliding windows at the given stride."""
    x = _as_tensor(x)
    length = x.shape[2]
    view = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=2)
    data = np.ascontiguousarray(view[:, :, ::stride, :])
    def vjp(g):
        return (_fold(g, length, stride),)
    return _from_op(data, (x,), vjp, "unfold")


def _fold(g, length: int, stride: int) -> Tensor:
    """Transpose of _unfold: scatter-add windows back onto the time axis."""
    g = _as_tensor(g)
    b, c, w, k = g.shape
    out = np.zeros((b, c, length), dtype=g.data.dtype)
    for j in range(k):
        out[:, :, j : j + stride * w : stride] += g.data[:, :, :, j]
    def vjp(gg):
        return (_unfold(gg, k, stride),)
    return _from_op(out, (g,), vjp, "fold")


def _contract(a, b, spec: str) -> Tensor:
    """einsum over two operands; every index must appear in two of the three terms."""
    a, b = _as_tensor(a), _as_tensor(b)
    ins, out = spec.split("->")
    sa, sb = ins.split(",")
    def vjp(g):
        ga = _contract(g, b, f"{out},{sb}->{sa}")
        gb = _contract(a, g, f"{sa},{out}->{sb}")
        return ga, gb
    return _from_op(np.einsum(spec, a.data, b.data, optimize=True), (a, b), vjp, "contract")


def conv1d(x, weight, bias=None, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of (b, c_in, L) with (c_out, c_in, k) filters.

    Same-padding zero-pads symmetrically (extra sample on the right) so the
    output length is ceil(L/stride); valid-padding requires L >= k.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 3:
        raise ValueError(f"conv1d input must be rank 3, got shape {x.shape}")
    if weight.ndim != 3:
        raise ValueError(f"conv1d weight must be rank 3, got shape {weight.shape}")
    c_out, c_in, k = weight.shape
    if x.shape[1] != c_in:
        raise ValueError(f"channel mismatch: input has {x.shape[1]} channels, weight expects {c_in}")
    if not isinstance(stride, int) or stride < 1:
        raise ValueError(f"stride must be an integer >= 1, got {stride}")
    length = x.shape[2]
    if padding == "same":
        if k % 2 == 0:
            raise ValueError(f"same-padding requires an odd kernel, got {k}")
        out_len = -(-length // stride)
        total = max((out_len - 1) * stride + k - length, 0)
        left = total // 2
        xp = pad_axis(x, 2, left, total - left) if total else x
    elif padding == "valid":
        if length < k:
            raise ValueError(f"input length {length} shorter than kernel {k}")
        out_len = (length - k) // stride + 1
        xp = x
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    windows = _unfold(xp, k, stride)
    if windows.shape[2] > out_len:
        windows = slice_axis(windows, 2, 0, out_len)
    y = _contract(windows, weight, "bcwk,fck->bfw")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise ValueError(f"bias must have shape ({c_out},), got {bias.shape}")
        y = add(y, reshape(bias, (1, c_out, 1)))
    return y


def dense(x, weight, bias=None) -> Tensor:
    """(b, f) @ (f, o) + bias."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense shapes incompatible: {x.shape} @ {weight.shape}")
    y = _contract(x, weight, "bf,fo->bo")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"bias must have shape ({weight.shape[1]},), got {bias.shape}")
        y = add(y, reshape(bias, (1, weight.shape[1])))
    return y


def mean_time(x) -> Tensor:
    """Global average pool over the time axis: (b, c, L) -> (b, c)."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"mean_time expects rank 3, got shape {x.shape}")
    return mul(sum_axes(x, (2,)), 1.0 / x.shape[2])


def subpixel_shuffle1d(x, r: int) -> Tensor:
    """Interleave r*c channels of length L into c channels of length r*L.

    out[b, ch, t*r + s] = in[b, ch*r + s, t].
    """
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"subpixel shuffle expects rank 3, got shape {x.shape}")
    if not isinstance(r, int) or r < 2:
        raise ValueError(f"shuffle factor must be an integer >= 2, got {r}")
    b, cr, length = x.shape
    if cr % r != 0:
        raise ValueError(f"channels ({cr}) not divisible by shuffle factor {r}")
    c = cr // r
    h = reshape(x, (b, c, r, length))
    h = transpose(h, (0, 1, 3, 2))
    return reshape(h, (b, c, length * r))


def subpixel_unshuffle1d(x, r: int) -> Tensor:
    """Exact inverse of subpixel_shuffle1d."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"subpixel unshuffle expects rank 3, got shape {x.shape}")
    if not isinstance(r, int) or r < 2:
        raise ValueError(f"shuffle factor must be an integer >= 2, got {r}")
    b, c, length = x.shape
    if length % r != 0:
        raise ValueError(f"length ({length}) not divisible by shuffle factor {r}")
    h = reshape(x, (b, c, length // r, r))
    h = transpose(h, (0, 1, 3, 2))
    return reshape(h, (b, c * r, length // r))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def l1(pred, target) -> Tensor:
    """Mean absolute error over all elements."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return mean_all(absolute(sub(pred, target)))


def l2(pred, target) -> Tensor:
    """Mean squared error over all elements."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = sub(pred, target)
    return mean_all(mul(d, d))


# ---------------------------------------------------------------------------
# reverse-mode traversal
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order  # dependencies before dependents


def _backprop(root: Tensor, seed: Tensor, create_graph: bool, capture_ids: set[int]):
    """Propagate the seed gradient; return {id: grad} for leaves and captures."""
    grads: dict[int, Tensor] = {id(root): seed}
    holders: dict[int, Tensor] = {id(root): root}
    captured: dict[int, Tensor] = {}
    order = _toposort(root)
    ctx = _enable_grad() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in capture_ids or node._vjp is None:
                captured[id(node)] = g
            if node._vjp is None:
                continue
            if create_graph and not node._double_ok:
                raise GraphError(f"op '{node._op}' does not support double-backward")
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pid = id(p)
                holders[pid] = p
                prev = grads.get(pid)
                grads[pid] = pg if prev is None else add(prev, pg)
    return captured, holders


def backward(loss: Tensor, params=None, create_graph: bool = False) -> None:
    """Accumulate gradients of a scalar loss into ``.grad`` of reachable leaves.

    When ``params`` is given, any parameter the graph does not touch gets an
    explicit zero gradient.
    """
    loss = _as_tensor(loss)
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        seed = Tensor(np.ones_like(loss.data))
        captured, holders = _backprop(loss, seed, create_graph, set())
        for nid, g in captured.items():
            t = holders[nid]
            if not t.requires_grad or t._vjp is not None:
                continue
            gt = g if create_graph else Tensor(g.data)
            t.grad = gt if t.grad is None else Tensor(t.grad.data + gt.data)
    if params is not None:
        for p in params:
            t = p.tensor if isinstance(p, Parameter) else p
            if t.grad is None:
                t.grad = Tensor(np.zeros_like(t.data))


def input_gradient(output: Tensor, x: Tensor, create_graph: bool = True) -> Tensor:
    """Gradient of a scalar graph output w.r.t. ``x``, returned as a graph node.

    With ``create_graph`` (the default) the result can be differentiated again,
    which is what the critic's gradient penalty needs.
    """
    output = _as_tensor(output)
    if output.size != 1:
        raise GraphError(f"input_gradient needs a scalar output, got shape {output.shape}")
    if not isinstance(x, Tensor) or not x.requires_grad:
        raise GraphError("input tensor must have requires_grad=True")
    if not output.requires_grad:
        raise GraphError("output does not depend on any differentiable tensor")
    seed = Tensor(np.ones_like(output.data))
    captured, _ = _backprop(output, seed, create_graph, {id(x)})
    g = captured.get(id(x))
    if g is None:
        raise GraphError("tensor does not participate in the output's graph")
    return g


# ---------------------------------------------------------------------------
# parameters and Adam
# ---------------------------------------------------------------------------

class Parameter:
    """Named trainable tensor."""

    def __init__(self, name: str, data):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} contains non-finite values")
        self.name = name
        self.tensor = Tensor(arr, requires_grad=True)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = np.asarray(value, dtype=self.tensor.data.dtype)

    @property
    def grad(self) -> Tensor | None:
        return self.tensor.grad

    @property
    def shape(self):
        return self.tensor.shape

    @property
    def size(self) -> int:
        return self.tensor.size

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class AdamState:
    """Adam optimizer state shared across all parameters of one model."""

    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.alpha <= 0 or self.eps <= 0:
            raise ValueError("alpha and eps must be positive")
        if self.t < 0:
            raise ValueError("step counter must be >= 0")


def adam_step(params, state: AdamState) -> None:
    """One bias-corrected Adam update over ``params``; increments ``state.t`` once."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient; run backward first")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for p in params:
        g = p.grad.data
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
        v = state.v.get(p.name)
        if v is None:
            v = state.v[p.name] = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - state.alpha * (m / bc1) / (np.sqrt(v / bc2) + state.eps)

