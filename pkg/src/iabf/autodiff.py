"""Minimal reverse-mode automatic differentiation on dense numpy arrays.

Graphs are built implicitly by applying operations to `Tensor` values
(define-by-run); `Tensor.backward` walks the recorded graph in reverse
topological order and accumulates gradients into every node it reaches.
The op set is intentionally small: affine maps, sigmoid/softplus, elementwise
arithmetic, log/exp, reductions, log-sum-exp, clip, reshape and concat --
enough for small fully connected networks and entropy-style losses.

Numeric conventions: parameters and activations default to float32;
reductions (sum/mean/logsumexp) accumulate in float64 before casting back.
Every op checks its output for NaN/Inf and raises `NonFiniteError`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_FINITE_CHECKS = True


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op finiteness checks; returns the previous setting."""
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return previous


def _coerce(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "_prev", "_backward")

    # Make `ndarray <op> Tensor` defer to the Tensor reflected operators.
    __array_ufunc__ = None

    def __init__(self, data, dtype=None):
        self.data = _coerce(data, dtype)
        self.grad = None
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def _accum(self, g):
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, output_grad=None):
        """Accumulate gradients of this tensor into every upstream node.

        `output_grad` defaults to ones (i.e. d(self)/d(self)); it must match
        this tensor's shape. Gradient accumulation is linear in it.
        """
        if output_grad is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(output_grad, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ValueError(
                    f"output_grad shape {seed.shape} != tensor shape {self.data.shape}"
                )
        order = self._toposort()
        self._accum(seed.copy())
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def _toposort(self):
        order, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                stack.append((parent, False))
        return order

    def detach(self) -> "Tensor":
        """A leaf tensor sharing this tensor's values; blocks gradient flow."""
        return Tensor(self.data)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def logsumexp(self, axis, keepdims=False):
        return logsumexp(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    scalar = np.isscalar(x) or (isinstance(x, np.ndarray) and x.ndim == 0)
    dtype = like.data.dtype if isinstance(like, Tensor) and scalar else None
    return Tensor(x, dtype=dtype)


def _pair(a, b):
    """Coerce both operands; python scalars adopt the Tensor operand's dtype."""
    ref = a if isinstance(a, Tensor) else (b if isinstance(b, Tensor) else None)
    return _as_tensor(a, like=ref), _as_tensor(b, like=ref)


def _make(data, prev, backward, op: str) -> Tensor:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value in output of '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._prev = tuple(p for p in prev if isinstance(p, Tensor))
    out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    out = _make(a.data + b.data, (a, b), None, "add")

    def backward():
        a._accum(_unbroadcast(out.grad, a.data.shape))
        b._accum(_unbroadcast(out.grad, b.data.shape))

    out._backward = backward
    return out


def sub(a, b):
    a, b = _pair(a, b)
    out = _make(a.data - b.data, (a, b), None, "sub")

    def backward():
        a._accum(_unbroadcast(out.grad, a.data.shape))
        b._accum(_unbroadcast(-out.grad, b.data.shape))

    out._backward = backward
    return out


def mul(a, b):
    a, b = _pair(a, b)
    out = _make(a.data * b.data, (a, b), None, "mul")

    def backward():
        a._accum(_unbroadcast(b.data * out.grad, a.data.shape))
        b._accum(_unbroadcast(a.data * out.grad, b.data.shape))

    out._backward = backward
    return out


def div(a, b):
    a, b = _pair(a, b)
    out = _make(a.data / b.data, (a, b), None, "div")

    def backward():
        a._accum(_unbroadcast(out.grad / b.data, a.data.shape))
        b._accum(_unbroadcast(-out.data * out.grad / b.data, b.data.shape))

    out._backward = backward
    return out


def neg(a):
    a = _as_tensor(a)
    out = _make(-a.data, (a,), None, "neg")

    def backward():
        a._accum(-out.grad)

    out._backward = backward
    return out


def square(a):
    a = _as_tensor(a)
    out = _make(a.data * a.data, (a,), None, "square")

    def backward():
        a._accum(2.0 * a.data * out.grad)

    out._backward = backward
    return out


# -- affine --------------------------------------------------------------


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects rank-2 operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.data.shape} @ {b.data.shape}")
    out = _make(a.data @ b.data, (a, b), None, "matmul")

    def backward():
        a._accum(out.grad @ b.data.T)
        b._accum(a.data.T @ out.grad)

    out._backward = backward
    return out


def affine(x, w, b):
    """x @ w + b with bias broadcast over rows."""
    return add(matmul(x, w), b)


# -- nonlinearities and pointwise transcendentals ------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    out = _make(s, (a,), None, "sigmoid")

    def backward():
        a._accum(out.data * (1.0 - out.data) * out.grad)

    out._backward = backward
    return out


def softplus(a):
    a = _as_tensor(a)
    data = np.maximum(a.data, 0) + np.log1p(np.exp(-np.abs(a.data)))
    out = _make(data, (a,), None, "softplus")

    def backward():
        a._accum(_sigmoid(a.data) * out.grad)

    out._backward = backward
    return out


def exp(a):
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = _make(np.exp(a.data), (a,), None, "exp")

    def backward():
        a._accum(out.data * out.grad)

    out._backward = backward
    return out


def log(a):
    a = _as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = _make(np.log(a.data), (a,), None, "log")

    def backward():
        a._accum(out.grad / a.data)

    out._backward = backward
    return out


def clip(a, lo: float, hi: float):
    """Clamp values to [lo, hi]; gradient passes only where lo <= x <= hi."""
    a = _as_tensor(a)
    out = _make(np.clip(a.data, lo, hi), (a,), None, "clip")
    mask = (a.data >= lo) & (a.data <= hi)

    def backward():
        a._accum(mask * out.grad)

    out._backward = backward
    return out


# -- reductions (accumulate in float64) ----------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out = _make(np.asarray(data, dtype=a.data.dtype), (a,), None, "sum")

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    out._backward = backward
    return out


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    data = np.mean(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out = _make(np.asarray(data, dtype=a.data.dtype), (a,), None, "mean")

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum((np.broadcast_to(g, a.data.shape) / count).astype(a.data.dtype))

    out._backward = backward
    return out


def logsumexp(a, axis, keepdims=False):
    """log(sum(exp(x))) along `axis`, stabilized by max subtraction."""
    a = _as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    z = np.sum(np.exp(a.data - m), axis=axis, keepdims=True, dtype=np.float64)
    data = (m + np.log(z)).astype(a.data.dtype)
    full = data if keepdims else np.squeeze(data, axis=axis)
    out = _make(full, (a,), None, "logsumexp")

    def backward():
        g = out.grad
        res = out.data
        if not keepdims:
            g = np.expand_dims(g, axis)
            res = np.expand_dims(res, axis)
        a._accum(np.exp(a.data - res) * g)

    out._backward = backward
    return out


# -- shape manipulation ---------------------------------------------------


def reshape(a, shape):
    a = _as_tensor(a)
    out = _make(a.data.reshape(shape), (a,), None, "reshape")

    def backward():
        a._accum(out.grad.reshape(a.data.shape))

    out._backward = backward
    return out


def concat(tensors, axis=0):
    ts = [_as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), None, "concat")
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for t, start, stop in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(start, stop)
            t._accum(out.grad[tuple(idx)])

    out._backward = backward
    return out


# -- gradient verification -------------------------------------------------


@dataclass
class GradCheckBlock:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    blocks: list
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks)

    def __str__(self):
        lines = [f"grad check (tolerance {self.tolerance:g}):"]
        for b in self.blocks:
            status = "ok" if b.passed else "FAIL"
            lines.append(f"  {b.name:24s} max rel err {b.max_rel_error:.3e}  {status}")
        return "\n".join(lines)


def grad_check(fn, params: dict, tolerance: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of `fn()` against central finite differences.

    `fn` must rebuild and return a scalar Tensor from the parameter tensors in
    `params` (name -> Tensor) each time it is called. Per block the reported
    error is max_i |analytic_i - numeric_i| / max(||analytic||_inf,
    ||numeric||_inf). Use float64 parameters: with step 1e-5 the difference
    quotient has no meaningful precision in float32.
    """
    for p in params.values():
        p.grad = None
    out = fn()
    if out.data.ndim != 0 and out.data.size != 1:
        raise ValueError("grad_check requires a scalar objective")
    out.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else np.array(p.grad))
                for name, p in params.items()}

    blocks = []
    for name, p in params.items():
        numeric = np.zeros_like(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn().data)
            flat[i] = orig - step
            lo = float(fn().data)
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * step)
        a = analytic[name].astype(np.float64)
        scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(numeric), initial=0.0))
        err = 0.0 if scale < 1e-12 else float(np.max(np.abs(a - numeric)) / scale)
        blocks.append(GradCheckBlock(name, err, err <= tolerance))
    return GradCheckReport(blocks, tolerance)


def run_mlp_grad_checks(instances: int = 100, seed: int = 0, tolerance: float = 1e-4):
    """Gradient-check `instances` random sigmoid/softplus MLPs; returns reports.

    Each instance draws a random depth (1-3 hidden layers), random widths and
    a random scalarizing loss, all in float64.
    """
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(instances):
        depth = int(rng.integers(1, 4))
        dims = [int(rng.integers(2, 7)) for _ in range(depth + 2)]
        x = Tensor(rng.normal(size=(3, dims[0])))
        target = rng.normal(size=(3, dims[-1]))
        params = {}
        for layer, (fin, fout) in enumerate(zip(dims[:-1], dims[1:])):
            params[f"w{layer}"] = Tensor(rng.normal(size=(fin, fout)) / np.sqrt(fin))
            params[f"b{layer}"] = Tensor(rng.normal(size=fout) * 0.1)
        act = sigmoid if rng.random() < 0.5 else softplus

        def loss(params=params, x=x, target=target, depth=depth, act=act):
            h = x
            for layer in range(depth + 1):
                h = affine(h, params[f"w{layer}"], params[f"b{layer}"])
                if layer < depth:
                    h = act(h)
            return square(sub(sigmoid(h), target)).sum()

        reports.append(grad_check(loss, params, tolerance=tolerance))
    return reports
