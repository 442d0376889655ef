"""Dense float64 arrays with a define-by-run reverse-mode autodiff tape.

Every op returns a new :class:`Tensor` holding a reference to its parents and
a closure that pushes the output gradient back to them.  ``backward`` walks
the recorded graph in reverse topological order.
"""

from __future__ import annotations

import struct

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""

    def __init__(self, op, message):
        super().__init__(f"{op}: {message}")
        self.op = op


class DomainError(ValueError):
    """Raised when an op is evaluated outside its mathematical domain."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "branch")

    def __init__(self, data, requires_grad=False, op="leaf", parents=()):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = None
        # which piece of a piecewise op was taken (None for smooth ops)
        self.branch = None

    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.shape[0]

    # ------------------------------------------------------------------
    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(self.op, f"backward needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ------------------------------------------------------------------
    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None):
        return tmax(self, axis)

    def min(self, axis=None):
        return tmin(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def make_op(data, parents, op, backward, branch=None):
    """Wrap ``data`` as the output of a custom op; ``backward(g)`` returns one grad per parent.

    Piecewise ops pass ``branch``, an array naming the piece each output took.
    """
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, op=op, parents=parents if needs else ())
    if needs:
        out._backward = backward
        out.branch = branch
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# ----------------------------------------------------------------------
# elementwise
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return make_op(a.data + b.data, (a, b), "add",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return make_op(a.data - b.data, (a, b), "sub",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(a.data * b.data, (a, b), "mul", backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), "div", backward)


def scale(a, c):
    """Multiply by a Python scalar."""
    c = float(c)
    return make_op(a.data * c, (a,), "scale", lambda g: (g * c,))


def power(a, p):
    p = float(p)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return make_op(a.data ** p, (a,), "pow", backward)


def relu(a):
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,), branch=mask)


def exp(a):
    out = np.exp(a.data)
    return make_op(out, (a,), "exp", lambda g: (g * out,))


def log(a):
    if np.any(a.data <= 0):
        raise DomainError(f"log: non-positive input (min {a.data.min()!r})")
    return make_op(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def tabs(a):
    sign = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), "abs", lambda g: (g * sign,), branch=sign)


def sigmoid(a):
    # split by sign so large |x| never overflows exp
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_op(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def clip(a, lo, hi):
    inside = (a.data >= lo) & (a.data <= hi)
    piece = np.where(a.data < lo, -1, np.where(a.data > hi, 1, 0))
    return make_op(np.clip(a.data, lo, hi), (a,), "clip", lambda g: (g * inside,), branch=piece)


# ----------------------------------------------------------------------
# reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return make_op(out, (a,), "sum", backward)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return make_op(out, (a,), "mean", backward)


def _extreme(a, axis, pick, op):
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(pick(flat))
        out = flat[idx]

        def backward(g):
            full = np.zeros(a.size)
            full[idx] = g
            return (full.reshape(a.shape),)

        return make_op(out, (a,), op, backward, branch=np.array(idx))
    axis = axis % a.ndim
    idx = np.expand_dims(pick(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros(a.shape)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return make_op(out, (a,), op, backward, branch=idx)


def tmax(a, axis=None):
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    return _extreme(a, axis, np.argmax, "max")


def tmin(a, axis=None):
    """Min along ``axis``; the gradient goes to the first minimal entry."""
    return _extreme(a, axis, np.argmin, "min")


# ----------------------------------------------------------------------
# shape ops
def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}") from None
    return make_op(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_op(out, (a,), "transpose", lambda g: (np.transpose(g, inv),))


def getitem(a, index):
    out = a.data[index]

    def backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return make_op(out, (a,), "getitem", backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError("stack", f"mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_op(out, tuple(tensors), "stack", backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", str(exc)) from None
    edges = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, edges, axis=axis))

    return make_op(out, tuple(tensors), "concat", backward)


# ----------------------------------------------------------------------
# linear algebra
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"incompatible {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), "matmul", backward)


def sqdist(a, b):
    """Squared Euclidean distance along the last axis, with broadcasting."""
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError("sqdist", f"last axes differ: {a.shape} vs {b.shape}")
    d = a - b
    return (d * d).sum(axis=-1)


def l1_norm(a):
    return tabs(a).sum()


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution over NHWC input with an (kh, kw, cin, cout) kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError("conv2d", f"input {x.shape} incompatible with kernel {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    cols = np.empty((n, ho, wo, kh, kw, cin))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]
    cols = cols.reshape(n * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError("conv2d", f"bias shape {b.shape} != ({cout},)")
        out = out + b.data
        parents = (x, w, b)
    keep_cols = cols if w.requires_grad else None
    del cols

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, p:p + h, p:p + wd, :] if p else gxp
        if w.requires_grad:
            gw = (keep_cols.T @ g2).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw, gb)[:len(parents)]

    return make_op(out, parents, "conv2d", backward)


def bilinear_matrix(n_in, n_out):
    """(n_out, n_in) interpolation matrix with half-pixel centres.

    Rows are convex weights, so the map never leaves the input's range.
    """
    m = np.zeros((n_out, n_in))
    scale_ = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale_ - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def upsample_bilinear(a, height, width):
    """Bilinearly resize the last two axes of ``a`` to (height, width)."""
    a = as_tensor(a)
    ry = Tensor(bilinear_matrix(a.shape[-2], height))
    rx = Tensor(bilinear_matrix(a.shape[-1], width).T)
    return matmul(matmul(ry, a), rx)


# ----------------------------------------------------------------------
class Graph:
    """A named-input computation, recorded on every :meth:`forward` call.

    ``fn`` receives keyword Tensors and must return a Tensor.  Inputs listed
    in ``trainable`` (or all inputs when omitted) get ``requires_grad``.
    """

    def __init__(self, fn, trainable=None):
        self.fn = fn
        self.trainable = None if trainable is None else set(trainable)
        self.inputs = {}
        self.output = None

    def forward(self, **inputs):
        self.inputs = {}
        for name, value in inputs.items():
            arr = value.data if isinstance(value, Tensor) else value
            rg = self.trainable is None or name in self.trainable
            self.inputs[name] = Tensor(np.array(arr, dtype=DTYPE), requires_grad=rg)
        self.output = self.fn(**self.inputs)
        if not isinstance(self.output, Tensor):
            raise TypeError("graph function must return a Tensor")
        return self.output

    @property
    def nodes(self):
        if self.output is None:
            return []
        return topological_order(self.output)

    def branches(self):
        """Branch patterns of the piecewise ops in the last forward, in tape order."""
        return [(n.op, n.branch) for n in self.nodes if n.branch is not None]

    def gradient(self, wrt=None):
        if self.output is None:
            raise RuntimeError("forward must be evaluated before gradient")
        if self.output.size != 1:
            raise ShapeError(self.output.op, f"terminal node is not scalar: {self.output.shape}")
        names = list(self.inputs) if wrt is None else list(wrt)
        for t in self.inputs.values():
            t.zero_grad()
        self.output.backward()
        return {k: (self.inputs[k].grad if self.inputs[k].grad is not None
                    else np.zeros(self.inputs[k].shape)) for k in names}


def forward(graph, inputs):
    return graph.forward(**inputs)


def gradient(graph, wrt=None):
    return graph.gradient(wrt)


def _same_branches(a, b):
    return len(a) == len(b) and all(oa == ob and np.array_equal(ba, bb) for (oa, ba), (ob, bb) in zip(a, b))


def finite_diff_check(graph, wrt, h=1e-5, coords=None, rng=None, min_h=None, support=0):
    """Max relative error of the analytic gradient against central differences.

    ``coords`` limits the check to that many randomly chosen coordinates;
    ``support`` adds that many more drawn from where the analytic gradient
    is nonzero, which matters for sparse gradients.  The graph's most recent inputs are used as the evaluation point.

    With ``min_h`` set, a probe pair that lands on a different piece of some
    relu/abs/clip/max/min than the evaluation point has stepped over a kink,
    where central differences do not estimate the derivative; the step is
    cut tenfold for that coordinate until the pieces agree or ``min_h`` is
    reached.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = {k: v.data.copy() for k, v in graph.inputs.items()}
    if graph.output is None:
        graph.forward(**base)
    analytic = graph.gradient([wrt])[wrt]
    ref = graph.branches() if min_h is not None else None
    x = base[wrt]
    rng = np.random.default_rng(0) if rng is None else rng
    flat_idx = np.arange(x.size)
    if coords is not None and coords < x.size:
        flat_idx = rng.choice(x.size, size=coords, replace=False)
    if support:
        nz = np.flatnonzero(analytic)
        picked = rng.choice(nz, size=min(support, nz.size), replace=False)
        flat_idx = np.concatenate([flat_idx, picked]).astype(np.int64)
    worst = 0.0
    for fi in flat_idx:
        idx = np.unravel_index(fi, x.shape)
        step = h
        while True:
            vals, smooth = [], True
            for sgn in (1.0, -1.0):
                probe = dict(base)
                xp = x.copy()
                xp[idx] += sgn * step
                probe[wrt] = xp
                vals.append(graph.forward(**probe).item())
                if ref is not None:
                    smooth = smooth and _same_branches(ref, graph.branches())
            if smooth or step / 10 < min_h:
                break
            step /= 10
        numeric = (vals[0] - vals[1]) / (2 * step)
        a = analytic[idx]
        worst = max(worst, abs(a - numeric) / (abs(a) + 1e-8))
    graph.forward(**base)
    return worst


# ----------------------------------------------------------------------
class AdamState:
    """First/second moment buffers and the step counter."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0


def adam_step(params, grads, lr, state):
    """One Adam update, in place.  ``lr`` is a float or a per-name dict."""
    for k, p in params.items():
        if grads[k].shape != np.shape(p):
            raise ShapeError("adam_step", f"grad for {k!r} has shape {grads[k].shape}, param {np.shape(p)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        rate = lr[k] if isinstance(lr, dict) else lr
        if rate <= 0:
            raise ValueError("learning rate must be positive")
        p -= rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ----------------------------------------------------------------------
# little-endian (rank u32, extents u32..., f64 values)
def tensor_to_bytes(arr):
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    header = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes()


def tensor_from_bytes(buf, offset=0):
    """Decode one tensor starting at ``offset``; returns (array, new offset)."""
    if len(buf) < offset + 4:
        raise ValueError(f"truncated tensor header at byte {offset}")
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if len(buf) < offset + 4 * rank:
        raise ValueError(f"truncated tensor extents at byte {offset}")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    end = offset + 8 * count
    if len(buf) < end:
        raise ValueError(f"truncated tensor payload at byte {offset}")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).astype(DTYPE)
    return arr, end
