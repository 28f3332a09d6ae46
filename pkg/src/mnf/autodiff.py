"""Dense tensors with reverse-mode automatic differentiation and seeded sampling.

The tape is implicit: every differentiable primitive records its parents and
vector-Jacobian closures on the output tensor, so creation order is recording
order and the graph is rebuilt from scratch each forward pass (define-by-run).
``backward`` walks that graph once and returns a gradient table; it never
mutates the graph, so running it twice yields identical gradients.

Broadcasting follows numpy's trailing-dimension alignment rules: shapes are
right-aligned and a dimension of 1 stretches to match.  Gradients of
broadcast operands are summed back over the stretched axes.

Randomness comes from :class:`Rng`, a PCG64 generator addressed by a seed
plus a child path (numpy ``SeedSequence``), so every stochastic call site is
reproducible and streams can be split deterministically.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericFault

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Set the dtype for new leaf tensors (float64 default, float32 for speed)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class no_grad:
    """Context manager that disables graph recording (fast inference passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """n-d array plus optional recorded parents/vjps for gradient tracking.

    A leaf created with ``requires_grad=True`` is a trainable parameter and
    receives an entry in the gradient table; a leaf without it is a constant
    that never receives gradient contributions.
    """

    __slots__ = ("data", "requires_grad", "parents", "vjps", "op", "name")

    def __init__(self, data, requires_grad=False, parents=(), vjps=(), op=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE) if not parents else data
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjps = vjps
        self.op = op
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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{tag})"

    # identity-based hashing so gradient tables can be keyed by parameter
    def __hash__(self):
        return id(self)

    # arithmetic sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name=None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _out(data, parents, vjps, op):
    """Record one primitive result, checking finiteness and grad requirements."""
    if not np.isfinite(data).all():
        raise NumericFault(op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, vjps=vjps, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    """Sum gradient over axes that were stretched by broadcasting to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_elementwise(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise primitives

def add(a, b):
    a, b = constant(a), constant(b)
    _check_elementwise(a, b, "add")
    return _out(a.data + b.data, (a, b),
                (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
                "add")


def sub(a, b):
    a, b = constant(a), constant(b)
    _check_elementwise(a, b, "sub")
    return _out(a.data - b.data, (a, b),
                (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
                "sub")


def mul(a, b):
    a, b = constant(a), constant(b)
    _check_elementwise(a, b, "mul")
    return _out(a.data * b.data, (a, b),
                (lambda g: _unbroadcast(g * b.data, a.shape),
                 lambda g: _unbroadcast(g * a.data, b.shape)),
                "mul")


def div(a, b):
    a, b = constant(a), constant(b)
    _check_elementwise(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _out(data, (a, b),
                (lambda g: _unbroadcast(g / b.data, a.shape),
                 lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
                "div")


def neg(a):
    a = constant(a)
    return _out(-a.data, (a,), (lambda g: -g,), "neg")


def tanh(a):
    a = constant(a)
    t = np.tanh(a.data)
    return _out(t, (a,), (lambda g: g * (1.0 - t * t),), "tanh")


def sigmoid(a):
    a = constant(a)
    # evaluate on the negative half-line only so exp never overflows
    s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return _out(s, (a,), (lambda g: g * s * (1.0 - s),), "sigmoid")


def exp(a):
    a = constant(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _out(e, (a,), (lambda g: g * e,), "exp")


def log(a):
    a = constant(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return _out(out, (a,), (lambda g: g / a.data,), "log")


def sqrt(a):
    a = constant(a)
    with np.errstate(invalid="ignore"):
        r = np.sqrt(a.data)
    return _out(r, (a,), (lambda g: g * 0.5 / np.where(r == 0, np.inf, r),), "sqrt")


def square(a):
    a = constant(a)
    return _out(a.data * a.data, (a,), (lambda g: g * 2.0 * a.data,), "square")


def relu(a):
    a = constant(a)
    return _out(np.maximum(a.data, 0.0), (a,), (lambda g: g * (a.data > 0),), "relu")


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient passes only where unclamped."""
    a = constant(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _out(np.clip(a.data, lo, hi), (a,), (lambda g: g * inside,), "clip")


def minimum(a, b):
    a, b = constant(a), constant(b)
    _check_elementwise(a, b, "minimum")
    take_a = a.data <= b.data
    return _out(np.minimum(a.data, b.data), (a, b),
                (lambda g: _unbroadcast(g * take_a, a.shape),
                 lambda g: _unbroadcast(g * ~take_a, b.shape)),
                "minimum")


def maximum(a, b):
    a, b = constant(a), constant(b)
    _check_elementwise(a, b, "maximum")
    take_a = a.data >= b.data
    return _out(np.maximum(a.data, b.data), (a, b),
                (lambda g: _unbroadcast(g * take_a, a.shape),
                 lambda g: _unbroadcast(g * ~take_a, b.shape)),
                "maximum")


# ---------------------------------------------------------------------------
# shape primitives

def broadcast_to(a, shape):
    a = constant(a)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ContractError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return _out(np.ascontiguousarray(data), (a,), (lambda g: _unbroadcast(g, a.shape),), "broadcast")


def reshape(a, shape):
    a = constant(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot reshape {old} to {shape}") from None
    return _out(data, (a,), (lambda g: g.reshape(old),), "reshape")


def transpose(a, axes=None):
    a = constant(a)
    axes_ = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes_)
    return _out(np.transpose(a.data, axes_), (a,),
                (lambda g: np.transpose(g, inverse),), "transpose")


def gather(a, flat_indices):
    """Take elements of `a` (C-order flattened) at integer `flat_indices`."""
    a = constant(a)
    idx = np.asarray(flat_indices)

    def vjp(g):
        acc = np.zeros(a.size, dtype=g.dtype)
        np.add.at(acc, idx.ravel(), g.ravel())
        return acc.reshape(a.shape)

    return _out(a.data.ravel()[idx], (a,), (vjp,), "gather")


def sum_(a, axis=None, keepdims=False):
    a = constant(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.full(a.shape, g)
        g_ = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g_, a.shape).copy()

    return _out(data, (a,), (vjp,), "sum")


def mean(a, axis=None, keepdims=False):
    a = constant(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])

    def vjp(g):
        if axis is None:
            return np.full(a.shape, g / count)
        g_ = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g_, a.shape).copy() / count

    return _out(data, (a,), (vjp,), "mean")


# ---------------------------------------------------------------------------
# linear algebra / conv / pooling / softmax

def matmul(a, b):
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return _out(a.data @ b.data, (a, b),
                (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
                "matmul")


def _matmul_ordered(a, b):
    """Matmul with strictly sequential summation over the inner axis.

    Used by conv2d so the lowered contraction agrees bit for bit with a
    naive nested-loop convolution; BLAS reorders partial sums, einsum
    without optimization does not.
    """
    return _out(np.einsum("pk,kf->pf", a.data, b.data, optimize=False), (a, b),
                (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
                "matmul")


def _pad2d(a, ph0, ph1, pw0, pw1):
    """Zero-pad the two spatial axes of a [B, H, W, C] tensor."""
    a = constant(a)
    widths = ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0))
    data = np.pad(a.data, widths)
    h, w = a.shape[1], a.shape[2]
    return _out(data, (a,),
                (lambda g: g[:, ph0:ph0 + h, pw0:pw0 + w, :],), "pad2d")


_CONV_INDEX_CACHE: dict = {}


def _conv_indices(b, hp, wp, c, kh, kw, oh, ow):
    """Flat gather indices turning a padded [B,Hp,Wp,C] array into im2col patches."""
    key = (b, hp, wp, c, kh, kw, oh, ow)
    cached = _CONV_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    bi = np.arange(b)[:, None, None, None, None, None]
    oi = np.arange(oh)[None, :, None, None, None, None]
    oj = np.arange(ow)[None, None, :, None, None, None]
    u = np.arange(kh)[None, None, None, :, None, None]
    v = np.arange(kw)[None, None, None, None, :, None]
    ci = np.arange(c)[None, None, None, None, None, :]
    idx = ((bi * hp + oi + u) * wp + oj + v) * c + ci
    idx = np.ascontiguousarray(np.broadcast_to(idx, (b, oh, ow, kh, kw, c))).reshape(
        b * oh * ow, kh * kw * c)
    if len(_CONV_INDEX_CACHE) > 64:
        _CONV_INDEX_CACHE.clear()
    _CONV_INDEX_CACHE[key] = idx
    return idx


def conv2d(x, kernel, padding="valid"):
    """2-D convolution (stride 1) of [B,H,W,Cin] with [kh,kw,Cin,Cf], via im2col.

    The patch matrix is gathered from the (optionally padded) input and the
    contraction runs through the single matmul gradient path.
    """
    x, kernel = constant(x), constant(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[3] != kernel.shape[2]:
        raise ContractError(f"conv2d: shapes {x.shape} and {kernel.shape} do not conform")
    if padding not in ("valid", "same"):
        raise ContractError(f"conv2d: unknown padding {padding!r}")
    b, h, w, cin = x.shape
    kh, kw, _, cf = kernel.shape
    if padding == "same":
        ph0, pw0 = (kh - 1) // 2, (kw - 1) // 2
        xp = _pad2d(x, ph0, kh - 1 - ph0, pw0, kw - 1 - pw0)
        oh, ow = h, w
    else:
        if kh > h or kw > w:
            raise ContractError(f"conv2d: kernel {kernel.shape} larger than input {x.shape}")
        xp = x
        oh, ow = h - kh + 1, w - kw + 1
    idx = _conv_indices(b, xp.shape[1], xp.shape[2], cin, kh, kw, oh, ow)
    patches = gather(xp, idx)
    out = _matmul_ordered(patches, reshape(kernel, (kh * kw * cin, cf)))
    return reshape(out, (b, oh, ow, cf))


def maxpool2x2(x):
    """Non-overlapping 2x2 max pooling on [B,H,W,C]; H and W must be even."""
    x = constant(x)
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ContractError(f"maxpool2x2: shape {x.shape} must be [B, even, even, C]")
    b, h, w, c = x.shape
    windows = x.data.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    flat = np.ascontiguousarray(windows).reshape(b, h // 2, w // 2, c, 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros_like(flat)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return gw.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, h, w, c)

    return _out(out, (x,), (vjp,), "maxpool2x2")


def log_softmax(a, axis=-1):
    a = constant(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    softmax = np.exp(out)
    return _out(out, (a,),
                (lambda g: g - softmax * g.sum(axis=axis, keepdims=True),),
                "log_softmax")


# registry exposing each primitive under its identifier
PRIMITIVES = {
    "matmul": matmul, "conv2d": conv2d, "add": add, "sub": sub, "mul": mul,
    "div": div, "tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log,
    "sqrt": sqrt, "square": square, "neg": neg, "relu": relu, "clip": clip,
    "minimum": minimum, "maximum": maximum, "broadcast": broadcast_to,
    "sum": sum_, "mean": mean, "maxpool2x2": maxpool2x2,
    "log_softmax": log_softmax, "gather": gather, "reshape": reshape,
    "transpose": transpose,
}


def apply_primitive(name, *args, **kwargs):
    """Evaluate one primitive by identifier (shape errors name both shapes)."""
    try:
        fn = PRIMITIVES[name]
    except KeyError:
        raise ContractError(f"unknown primitive {name!r}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# backward

def backward(loss: Tensor) -> dict:
    """Gradient of a scalar loss with respect to every attached leaf.

    Returns a table mapping leaf tensors (parameters) to ndarray gradients.
    Fan-out accumulates by summation; the walk is a pure function of the
    recorded graph, so repeated calls agree bit for bit.
    """
    if not isinstance(loss, Tensor) or loss.data.shape != ():
        raise ContractError("backward: loss must be a scalar tensor")
    if not loss.requires_grad:
        raise ContractError("backward: loss is detached from the tape")

    topo, visited, stack = [], set(), [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {loss: np.ones((), dtype=loss.data.dtype)}
    table = {}
    for node in reversed(topo):
        g = grads.pop(node, None)
        if g is None:
            continue
        if not node.parents:
            table[node] = g
            continue
        for p, vjp in zip(node.parents, node.vjps):
            if not p.requires_grad:
                continue
            contrib = vjp(g)
            acc = grads.get(p)
            grads[p] = contrib if acc is None else acc + contrib
    return table


# ---------------------------------------------------------------------------
# finite differences

class FiniteDiffReport:
    """Per-parameter comparison of analytic and central-difference gradients."""

    def __init__(self):
        self.entries = []

    def add(self, name, max_rel_err, ok, bad_indices):
        self.entries.append({"param": name, "max_rel_err": max_rel_err,
                             "ok": ok, "bad_indices": bad_indices})

    @property
    def ok(self):
        return all(e["ok"] for e in self.entries)

    def __repr__(self):
        lines = [f"{e['param']}: max_rel_err={e['max_rel_err']:.3e} "
                 f"{'pass' if e['ok'] else 'FAIL at ' + str(e['bad_indices'])}"
                 for e in self.entries]
        return "\n".join(lines) or "FiniteDiffReport(empty)"


def finite_diff_check(build_loss, params, rel_tol=1e-4, step=1e-5) -> FiniteDiffReport:
    """Check analytic gradients of `build_loss()` against central differences.

    `build_loss` must be deterministic given the current parameter values
    (replay any rng stream from a fixed seed inside it).  Relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
    """
    table = backward(build_loss())
    report = FiniteDiffReport()
    for i, p in enumerate(params):
        name = p.name or f"param{i}"
        analytic = table.get(p)
        if analytic is None:
            report.add(name, np.inf, False, ["no gradient recorded"])
            continue
        numeric = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        while not it.finished:
            j = it.multi_index
            orig = p.data[j]
            p.data[j] = orig + step
            up = build_loss().item()
            p.data[j] = orig - step
            down = build_loss().item()
            p.data[j] = orig
            numeric[j] = (up - down) / (2.0 * step)
            it.iternext()
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        rel = np.abs(analytic - numeric) / denom
        bad = np.argwhere(rel >= rel_tol)
        report.add(name, float(rel.max()) if rel.size else 0.0,
                   bad.size == 0, [tuple(b) for b in bad[:16]])
    return report


# ---------------------------------------------------------------------------
# random sampling

class Rng:
    """Deterministic random stream: PCG64 keyed by (seed, *child path).

    Identical (seed, path) pairs yield identical sample streams; `child`
    derives an independent stream without disturbing this one (numpy
    SeedSequence hashing), which keeps parallel evaluation reproducible.
    """

    def __init__(self, seed, _path=()):
        self.seed = int(seed)
        self.path = tuple(int(k) for k in _path)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.seed,) + self.path)))

    def child(self, *key) -> "Rng":
        return Rng(self.seed, self.path + tuple(int(k) for k in key))

    def normal(self, shape=()):
        return self._gen.standard_normal(shape).astype(_DEFAULT_DTYPE, copy=False)

    def bernoulli(self, p, shape=()):
        if not 0.0 <= p <= 1.0:
            raise ContractError(f"bernoulli: p={p} outside [0, 1]")
        return (self._gen.random(shape) < p).astype(_DEFAULT_DTYPE)

    def uniform(self, low=0.0, high=1.0, shape=()):
        return self._gen.uniform(low, high, shape).astype(_DEFAULT_DTYPE, copy=False)

    def integers(self, low, high=None, shape=()):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


def sample(rng: Rng, kind, shape) -> Tensor:
    """Draw a detached tensor: kind is 'standard-normal' or ('bernoulli', p)."""
    if kind == "standard-normal":
        return Tensor(rng.normal(shape))
    if isinstance(kind, tuple) and len(kind) == 2 and kind[0] == "bernoulli":
        return Tensor(rng.bernoulli(kind[1], shape))
    raise ContractError(f"sample: unknown kind {kind!r}")
