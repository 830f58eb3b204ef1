"""Dense float64 arrays with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure that pushes the
output gradient back to them. ``backward`` sorts the nodes reachable from a
scalar loss topologically and runs the closures once each, accumulating
gradients into ``.grad``.
"""
from __future__ import annotations

import json
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import scipy.sparse as sparse
from scipy.special import erf

_GRAD_ENABLED = True
_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _accum(t, g, fresh=False):
    # ``fresh``: g is a new array owned by nobody else, so it can be adopted
    if t.grad is None:
        if fresh and g.flags.writeable and g.shape == t.data.shape and g.dtype == np.float64:
            t.grad = g
        else:
            t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=np.float64, copy=True)
    else:
        t.grad += g


def _scatter_rows(n_rows, idx, g):
    """Sum rows of ``g`` (len(idx), ...) into an (n_rows, ...) array at ``idx``."""
    idx = np.asarray(idx).reshape(-1)
    g2 = g.reshape(len(idx), -1)
    m = sparse.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n_rows, len(idx)))
    return np.asarray(m @ g2).reshape((n_rows,) + g.shape[1:] if g.ndim > 1 else (n_rows,))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_ufunc__ = None  # make ``ndarray - Tensor`` defer to Tensor.__rsub__

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _make(cls, data, parents, backward, op):
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            out.op = op
        return out

    # -- introspection -------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def backward(self):
        backward(self)

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def _bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), _bw, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def _bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g, b.shape))

        return Tensor._make(a.data - b.data, (a, b), _bw, "sub")

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def _bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.shape), fresh=True)
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.shape), fresh=True)

        return Tensor._make(a.data * b.data, (a, b), _bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def _bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g * a.data / b.data**2, b.shape))

        return Tensor._make(a.data / b.data, (a, b), _bw, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        a = self

        def _bw(g):
            _accum(a, -g)

        return Tensor._make(-a.data, (a,), _bw, "neg")

    def __pow__(self, p):
        a = self
        p = float(p)

        def _bw(g):
            _accum(a, g * p * a.data ** (p - 1))

        return Tensor._make(a.data**p, (a,), _bw, "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a = self
        rows = isinstance(idx, np.ndarray) and idx.dtype.kind in "iu"

        def _bw(g):
            if rows:
                tail = g.shape[idx.ndim:]
                _accum(a, _scatter_rows(a.shape[0], idx, g.reshape((-1,) + tail)), fresh=True)
                return
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accum(a, full, fresh=True)

        return Tensor._make(a.data[idx], (a,), _bw, "index")

    # -- shape -----------------------------------------------------------
    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def _bw(g):
            _accum(a, g.reshape(a.shape))

        return Tensor._make(a.data.reshape(shape), (a,), _bw, "reshape")

    def transpose(self, *axes):
        a = self
        axes = axes or tuple(reversed(range(a.ndim)))
        inv = np.argsort(axes)

        def _bw(g):
            _accum(a, g.transpose(inv))

        return Tensor._make(a.data.transpose(axes), (a,), _bw, "transpose")

    @property
    def T(self):
        return self.transpose()

    # -- reductions ------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self

        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.shape))

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), _bw, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise functions ------------------------------------------
    def exp(self):
        a = self
        y = np.exp(a.data)

        def _bw(g):
            _accum(a, g * y)

        return Tensor._make(y, (a,), _bw, "exp")

    def log(self):
        a = self

        def _bw(g):
            _accum(a, g / a.data)

        return Tensor._make(np.log(a.data), (a,), _bw, "log")

    def sqrt(self):
        a = self
        y = np.sqrt(a.data)

        def _bw(g):
            _accum(a, g * 0.5 / y)

        return Tensor._make(y, (a,), _bw, "sqrt")

    def relu(self):
        a = self

        def _bw(g):
            _accum(a, g * (a.data > 0), fresh=True)

        return Tensor._make(np.maximum(a.data, 0.0), (a,), _bw, "relu")

    def tanh(self):
        a = self
        y = np.tanh(a.data)

        def _bw(g):
            _accum(a, g * (1.0 - y * y), fresh=True)

        return Tensor._make(y, (a,), _bw, "tanh")

    def sigmoid(self):
        a = self
        y = _sigmoid(a.data)

        def _bw(g):
            _accum(a, g * y * (1.0 - y), fresh=True)

        return Tensor._make(y, (a,), _bw, "sigmoid")

    def gelu(self):
        # exact form x * Phi(x)
        a = self
        cdf = 0.5 * (1.0 + erf(a.data / _SQRT2))

        def _bw(g):
            pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data**2)
            _accum(a, g * (cdf + a.data * pdf), fresh=True)

        return Tensor._make(a.data * cdf, (a,), _bw, "gelu")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- free-function primitives ---------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ValueError("matmul needs at least 1-d operands")
    k_a = a.shape[-1]
    k_b = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if k_a != k_b:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape} (inner {k_a} != {k_b})")
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-d; reshape vectors explicitly")

    def _bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape), fresh=True)
        if b.requires_grad:
            if b.ndim == 2:
                _accum(b, a.data.reshape(-1, k_a).T @ g.reshape(-1, g.shape[-1]), fresh=True)
            else:
                _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape), fresh=True)

    return Tensor._make(a.data @ b.data, (a, b), _bw, "matmul")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), _bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def _bw(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accum(t, np.take(g, i, axis=axis))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), _bw, "stack")


def take_rows(table, ids):
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}")

    def _bw(g):
        _accum(table, _scatter_rows(table.shape[0], ids, g.reshape(-1, table.shape[1])), fresh=True)

    return Tensor._make(table.data[ids], (table,), _bw, "take_rows")


def softmax(x, axis=-1, mask=None):
    """Numerically stable softmax; entries where ``mask`` is False get weight 0.

    A slice whose mask is entirely False yields all zeros.
    """
    x = as_tensor(x)
    if x.size == 0 or x.shape[axis] == 0:
        raise ValueError("softmax of an empty input")
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    mx = np.max(z, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(z - mx)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s == 0, 1.0, s)

    def _bw(g):
        _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)), fresh=True)

    return Tensor._make(y, (x,), _bw, "softmax")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def _bw(g):
        _accum(x, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return Tensor._make(y, (x,), _bw, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise over the last axis, then apply ``gain * xhat + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if n < 2:
        raise ValueError("layer_norm needs at least 2 features")
    if gain.shape[-1] != n or bias.shape[-1] != n:
        raise ValueError(f"layer_norm affine shape mismatch: {gain.shape}, {bias.shape} vs {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def _bw(g):
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(g, bias.shape))
        if x.requires_grad:
            d = g * gain.data
            dx = inv * (d - d.mean(axis=-1, keepdims=True)
                        - xhat * (d * xhat).mean(axis=-1, keepdims=True))
            _accum(x, dx, fresh=True)

    return Tensor._make(xhat * gain.data + bias.data, (x, gain, bias), _bw, "layer_norm")


def dropout(x, p, rng, training=True):
    """Inverted dropout; the keep-mask comes from ``rng`` so runs are reproducible."""
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep


def norm(x, axis=-1):
    """Euclidean norm; subgradient 0 at the origin."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis))

    def _bw(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        _accum(x, np.expand_dims(scale, axis) * x.data)

    return Tensor._make(n, (x,), _bw, "norm")


def cross_entropy(logits, targets):
    """Mean of ``-log softmax(logits)[target]`` over rows of a (M, C) array."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    m, c = logits.shape
    if targets.shape != (m,):
        raise ValueError(f"targets shape {targets.shape} does not match {m} rows")
    if m == 0:
        raise ValueError("cross_entropy needs at least one row")
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError(f"target id out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(m)
    loss = -logp[rows, targets].mean()

    def _bw(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        _accum(logits, d * (g / m))

    return Tensor._make(np.array(loss), (logits,), _bw, "cross_entropy")


# -- graph traversal -------------------------------------------------------

def build_graph(root):
    """Nodes reachable from ``root`` in topological order (inputs first)."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, leaves=None):
    """Fill ``.grad`` of every tensor that ``loss`` depends on.

    ``leaves`` (optional) get a zero gradient if the loss does not use them.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if leaves is not None:
        for t in leaves:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
    if not loss.requires_grad:
        return []
    graph = build_graph(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return graph


# -- gradient checking -----------------------------------------------------

def _rel_err(analytic, numeric, f0=0.0):
    """Elementwise relative error.

    Central differences carry round-off of roughly ``eps * sqrt(n_terms) / h``
    in the summed loss, so structurally zero gradients (e.g. an attention key
    bias) read as noise of 1e-10 or so; the denominator is floored at
    ``1e-5 * max(1, |f|)`` to compare those in absolute terms.
    """
    floor = 1e-5 * max(1.0, abs(f0))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(f, x, h=1e-5):
    """Max relative error between analytic and central-difference gradients of ``f`` at ``x``.

    ``f`` maps a Tensor to a scalar Tensor.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if not np.all(np.isfinite(out.data)):
        raise ValueError("f(x) is not finite")
    backward(out, leaves=[xt])
    analytic = xt.grad
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(x0)).item()
            flat[i] = orig - h
            fm = f(Tensor(x0)).item()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2 * h)
    return float(_rel_err(analytic, numeric, out.item()).max()) if x0.size else 0.0


def check_parameters(loss_fn, params, h=1e-5, max_coords=None, rng=None):
    """Finite-difference check of ``loss_fn()`` against every tensor in ``params``.

    Parameters are perturbed in place. ``max_coords`` limits the number of
    coordinates probed per tensor (sampled with ``rng``). Returns the max
    relative error and a per-name breakdown.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.item()):
        raise ValueError("loss is not finite")
    backward(loss, leaves=list(params.values()))
    report = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        analytic = p.grad.reshape(-1)[idx]
        numeric = np.empty(len(idx))
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                numeric[j] = (fp - fm) / (2 * h)
        report[name] = float(_rel_err(analytic, numeric, loss.item()).max()) if len(idx) else 0.0
    return max(report.values(), default=0.0), report


# -- parameter checkpoints -------------------------------------------------

CHECKPOINT_FORMAT = "artnet-params/1"


def save_params(path, params, meta=None):
    """Write an ordered ``name -> Tensor`` mapping as JSON (float64 repr round-trips exactly)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta or {},
        "params": [
            {"name": k, "shape": list(v.shape), "values": v.data.reshape(-1).tolist()}
            for k, v in params.items()
        ],
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(dict name -> ndarray, meta)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} checkpoint")
    out = {}
    for rec in doc["params"]:
        arr = np.asarray(rec["values"], dtype=np.float64)
        shape = tuple(rec["shape"])
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"{path}: parameter {rec['name']!r} has {arr.size} values for shape {shape}")
        out[rec["name"]] = arr.reshape(shape)
    return out, doc.get("meta", {})
