"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op records a node on an implicit tape: result tensors remember their
parents and a closure that pushes the output gradient back into them.
``backward`` walks reachable nodes in reverse creation order exactly once,
so gradients through shared subexpressions accumulate correctly.

Design constraints kept deliberately tight:
  * float64 only; inputs are converted on construction.
  * no broadcasting except scalar-times-tensor and bias-add (matrix + row
    vector); anything else raises DimensionError naming both shapes.
  * graphs are only built while gradients are enabled (see ``no_grad``),
    so inference incurs no tape bookkeeping at all.
"""

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

_node_counter = itertools.count()
# Grad mode is tracked per thread so parallel inference (each worker
# wrapping its forwards in no_grad) cannot corrupt another thread's mode.
_grad_state = threading.local()

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@contextmanager
def no_grad():
    """Disable graph recording inside the block (used for inference)."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def is_grad_enabled():
    return getattr(_grad_state, "enabled", True)


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_counter)
        self._parents = ()
        self._backward = None

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
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def _accum_owned(self, g):
        """``_accum`` for a float64 array the caller freshly allocated.

        Skips the defensive first-touch copy; only safe when ``g`` is not
        aliased by anything else (no views of caches, no arrays shared
        with another parent).
        """
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the module-level functions are the real API
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, s):
        if isinstance(s, Tensor):
            raise ContractError("tensor/tensor division is not supported")
        return mul(self, 1.0 / float(s))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data):
    """Constant tensor (no gradient)."""
    return Tensor(data, requires_grad=False)


def param(data):
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def _make(data, parents, backward_fn):
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def make_node(data, parents, backward_fn):
    """Public constructor for fused ops defined outside this module.

    ``backward_fn(g)`` must push the output gradient into every parent
    via ``Tensor._accum``; with gradients disabled the closure is dropped
    and a plain constant tensor comes back.
    """
    return _make(data, parents, backward_fn)


def backward(loss):
    """Backpropagate from a scalar, visiting nodes in reverse creation order.

    Each call computes the gradients of this pass in isolation, then adds
    them onto whatever ``.grad`` already held, so repeated calls (or
    per-example passes inside a batch) accumulate exactly.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not require grad; nothing to backpropagate")
    nodes = [loss]
    seen = {id(loss)}
    stack = [loss]
    while stack:
        t = stack.pop()
        for p in t._parents:
            if id(p) not in seen and p.requires_grad:
                seen.add(id(p))
                nodes.append(p)
                stack.append(p)
    nodes.sort(key=lambda t: t.node_id, reverse=True)
    prior = []
    for t in nodes:
        if t.grad is not None:
            prior.append((t, t.grad))
            t.grad = None
    loss._accum(np.ones_like(loss.data))
    for t in nodes:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    for t, old in prior:
        if t.grad is None:
            t.grad = old
        else:
            t.grad += old


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a, b):
    """a + b. Same shape, or bias-add of a row vector onto a matrix."""
    if not isinstance(b, Tensor) and not isinstance(a, Tensor):
        raise ContractError("add needs at least one Tensor")
    if not isinstance(b, Tensor):
        s = float(b)

        def bw_scalar(g):
            a._accum(g)

        return _make(a.data + s, (a,), bw_scalar)
    if not isinstance(a, Tensor):
        return add(b, a)
    if a.shape == b.shape:

        def bw_same(g):
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(g)

        return _make(a.data + b.data, (a, b), bw_same)
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:

        def bw_bias(g):
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(g.sum(axis=0))

        return _make(a.data + b.data, (a, b), bw_bias)
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def neg(a):
    def bw(g):
        a._accum(-g)

    return _make(-a.data, (a,), bw)


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    return add(a, neg(b))


def mul(a, b):
    """Elementwise product (same shape) or tensor times python scalar."""
    if not isinstance(a, Tensor):
        return mul(b, a)
    if not isinstance(b, Tensor):
        s = float(b)

        def bw_scale(g):
            a._accum(g * s)

        return _make(a.data * s, (a,), bw_scale)
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def scale(a, s):
    return mul(a, float(s))


def scale_rows(m, v):
    """Row i of the output is m[i] * v[i]; m is (n, d), v is (n,)."""
    if m.ndim != 2 or v.ndim != 1 or m.shape[0] != v.shape[0]:
        raise DimensionError(f"scale_rows: incompatible shapes {m.shape} and {v.shape}")

    def bw(g):
        if m.requires_grad:
            m._accum(g * v.data[:, None])
        if v.requires_grad:
            v._accum((g * m.data).sum(axis=1))

    return _make(m.data * v.data[:, None], (m, v), bw)


def matmul(a, b):
    """Matrix/vector product for 1-D and 2-D operands (no batch dims)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise DimensionError(f"matmul: only 1-D/2-D supported, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        if a.ndim == 2 and b.ndim == 2:
            if a.requires_grad:
                a._accum(g @ bd.T)
            if b.requires_grad:
                b._accum(ad.T @ g)
        elif a.ndim == 1 and b.ndim == 2:
            if a.requires_grad:
                a._accum(bd @ g)
            if b.requires_grad:
                b._accum(np.outer(ad, g))
        elif a.ndim == 2 and b.ndim == 1:
            if a.requires_grad:
                a._accum(np.outer(g, bd))
            if b.requires_grad:
                b._accum(ad.T @ g)
        else:
            if a.requires_grad:
                a._accum(g * bd)
            if b.requires_grad:
                b._accum(g * ad)

    return _make(ad @ bd, (a, b), bw)


def linear(x, w, b):
    """Affine map ``x @ w + b`` fused into one node.

    ``x`` is (n, din) or (din,); ``w`` is (din, dout); ``b`` is (dout,).
    """
    if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
        raise DimensionError(f"linear: weight {w.shape} and bias {b.shape} disagree")
    if x.ndim not in (1, 2) or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data

    def bw(g):
        if x.requires_grad:
            x._accum(g @ wd.T)
        if w.requires_grad:
            w._accum(xd.T @ g if xd.ndim == 2 else np.outer(xd, g))
        if b.requires_grad:
            b._accum(g.sum(axis=0) if g.ndim == 2 else g)

    return _make(xd @ wd + b.data, (x, w, b), bw)


def transpose(a):
    if a.ndim != 2:
        raise DimensionError(f"transpose: need a matrix, got shape {a.shape}")

    def bw(g):
        a._accum(g.T)

    return _make(a.data.T.copy(), (a,), bw)


def reshape(a, shape):
    orig = a.data.shape

    def bw(g):
        a._accum(g.reshape(orig))

    return _make(a.data.reshape(shape).copy(), (a,), bw)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")

    sizes = [t.data.shape[axis] for t in tensors]

    def bw(g):
        off = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(off, off + s)
                t._accum(g[tuple(idx)])
            off += s

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def slice_rows(a, start, stop):
    """Contiguous rows [start, stop) along the first axis."""

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[start:stop] = g
        a._accum(buf)

    return _make(a.data[start:stop].copy(), (a,), bw)


def row_vector(a, i):
    """Row ``i`` of a matrix as a plain vector (one node, not slice+reshape)."""
    if a.ndim != 2:
        raise DimensionError(f"row_vector: need a matrix, got shape {a.shape}")
    i = int(i)

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[i] = g
        a._accum(buf)

    return _make(a.data[i].copy(), (a,), bw)


def stack_rows(vec, mat):
    """Prepend a vector as row zero of a matrix (one node, not reshape+concat)."""
    if vec.ndim != 1 or mat.ndim != 2 or vec.shape[0] != mat.shape[1]:
        raise DimensionError(f"stack_rows: incompatible shapes {vec.shape} and {mat.shape}")

    def bw(g):
        if vec.requires_grad:
            vec._accum(g[0])
        if mat.requires_grad:
            mat._accum(g[1:])

    return _make(np.concatenate([vec.data[None, :], mat.data], axis=0), (vec, mat), bw)


def take(a, indices):
    """Gather rows (or elements of a vector) by integer index."""
    idx = np.asarray(indices, dtype=np.int64)

    def bw(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a._accum(buf)

    return _make(a.data[idx], (a,), bw)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a):
    def bw(g):
        a._accum(g * (a.data > 0))

    return _make(np.maximum(a.data, 0.0), (a,), bw)


def gelu_arrays(x):
    """Tanh-approximation GELU on a plain array.

    Returns (value, tanh cache, x*x cache); the caches feed
    ``gelu_grad_arrays`` so fused kernels do not recompute them.
    """
    x2 = x * x
    u = x2 * (_GELU_A * _GELU_C)
    u += _GELU_C
    u *= x
    t = np.tanh(u, out=u)
    y = t + 1.0
    y *= x
    y *= 0.5
    return y, t, x2


def gelu_grad_arrays(x, t, x2):
    """Derivative of the tanh-approximation GELU from cached pieces.

    Leaves x, t and x2 untouched so the caller's closure can run again.
    """
    du = x2 * (1.5 * _GELU_A * _GELU_C)
    du += 0.5 * _GELU_C
    w = t * t
    np.subtract(1.0, w, out=w)
    du *= w
    du *= x
    np.multiply(t, 0.5, out=w)
    w += 0.5
    du += w
    return du


def gelu_arrays_raw(x):
    """GELU without its leading 1/2, i.e. x * (1 + tanh(u)), on a plain array.

    Fused feed-forward kernels fold the missing 1/2 into the next weight
    matrix, which removes one full-size scaling pass in each direction.
    Returns (value, tanh cache, x*x cache) for ``gelu_grad_raw_arrays``.
    """
    x2 = x * x
    u = x2 * (_GELU_A * _GELU_C)
    u += _GELU_C
    u *= x
    t = np.tanh(u, out=u)
    y = t + 1.0
    y *= x
    return y, t, x2


def gelu_grad_raw_arrays(x, t, x2):
    """Derivative of ``gelu_arrays_raw`` from cached pieces.

    Leaves x, t and x2 untouched so the caller's closure can run again.
    """
    du = x2 * (3.0 * _GELU_A * _GELU_C)
    du += _GELU_C
    w = t * t
    np.subtract(1.0, w, out=w)
    du *= w
    du *= x
    du += t
    du += 1.0
    return du


def gelu(a):
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    y, t, x2 = gelu_arrays(x)

    def bw(g):
        a._accum(g * gelu_grad_arrays(x, t, x2))

    return _make(y, (a,), bw)


def exp(a):
    y = np.exp(a.data)

    def bw(g):
        a._accum(g * y)

    return _make(y, (a,), bw)


def log(a):
    def bw(g):
        a._accum(g / a.data)

    return _make(np.log(a.data), (a,), bw)


def absolute(a):
    def bw(g):
        a._accum(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), bw)


def softmax(a, axis=-1):
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        a._accum(y * (g - inner))

    return _make(y, (a,), bw)


def ln_forward_arrays(x, gain, bias, eps=1e-5):
    """Last-axis layer norm on plain arrays.

    Returns (value, xc, inv) where xc is the centered-but-unscaled input
    and inv the per-row reciprocal standard deviation; both are the
    caches ``ln_backward_arrays`` needs.  The normalized value x_hat is
    xc * inv[..., None] and is never materialized.
    """
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.asarray(np.einsum("...i,...i->...", xc, xc))
    var /= d
    var += eps
    np.sqrt(var, out=var)
    inv = np.divide(1.0, var, out=var)
    y = np.einsum("...i,...,i->...i", xc, inv, gain)
    y += bias
    return y, xc, inv


def ln_backward_arrays(g, xc, inv, gain):
    """Gradient wrt the normalized input from cached forward pieces.

    Leaves g, xc and inv untouched so the caller's closure can run again.
    """
    d = xc.shape[-1]
    dxhat = g * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    r = np.asarray(np.einsum("...i,...i->...", dxhat, xc))
    r /= d
    c2 = inv * inv
    c2 *= r
    dxhat -= m1
    dxhat -= xc * c2[..., None]
    dxhat *= inv[..., None]
    return dxhat


def ln_normalize_arrays(x, eps=1e-5):
    """Row standardization without the affine part: xhat = (x - mean) / std.

    Returns (xhat, inv); inv is the per-row reciprocal standard deviation
    without the trailing axis.  Fused kernels that fold the affine gain and
    bias into a following matmul use this instead of ``ln_forward_arrays``,
    so neither the gain multiply nor the bias add ever touches a
    sequence-sized array.
    """
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.asarray(np.einsum("...i,...i->...", xc, xc))
    var /= d
    var += eps
    np.sqrt(var, out=var)
    inv = np.divide(1.0, var, out=var)
    xhat = np.multiply(xc, inv[..., None], out=xc)
    return xhat, inv


def ln_backward_xhat(dxhat, xhat, inv):
    """Gradient wrt x given the gradient wrt xhat; consumes dxhat in place.

    dxhat must be owned by the caller (it is overwritten).  xhat and inv
    are left untouched so the caller's closure can run again.
    """
    d = xhat.shape[-1]
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = np.asarray(np.einsum("...i,...i->...", dxhat, xhat))
    m2 /= d
    dxhat -= m1
    dxhat -= xhat * m2[..., None]
    dxhat *= inv[..., None]
    return dxhat


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: affine shapes {gain.shape}/{bias.shape} do not match feature dim {(d,)}"
        )
    y, xc, inv = ln_forward_arrays(x.data, gain.data, bias.data, eps)
    lead = tuple(range(x.data.ndim - 1))
    lead_sub = "abcdefgh"[: x.data.ndim - 1]
    gain_spec = f"{lead_sub}i,{lead_sub}i,{lead_sub}->i"

    def bw(g):
        if bias.requires_grad:
            bias._accum(g.sum(axis=lead))
        if gain.requires_grad:
            gain._accum_owned(np.einsum(gain_spec, g, xc, inv))
        if x.requires_grad:
            x._accum_owned(ln_backward_arrays(g, xc, inv, gain.data))

    return _make(y, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------

def total_sum(a):
    def bw(g):
        a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _make(np.asarray(a.data.sum()), (a,), bw)


def mean(a):
    n = a.data.size

    def bw(g):
        a._accum(np.broadcast_to(g / n, a.data.shape).copy())

    return _make(np.asarray(a.data.mean()), (a,), bw)


def l1_loss(a, b, reduction="mean"):
    """Mean (or summed) absolute deviation between two tensors (one node)."""
    if a.shape != b.shape:
        raise DimensionError(f"l1_loss: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data - b.data
    if reduction == "mean":
        denom = diff.size
    elif reduction == "sum":
        denom = 1
    else:
        raise ContractError(f"l1_loss: unknown reduction {reduction!r}")

    def bw(g):
        d = np.sign(diff) * (g / denom)
        if a.requires_grad:
            a._accum(d)
        if b.requires_grad:
            b._accum(-d)

    return _make(np.asarray(np.abs(diff).sum() / denom), (a, b), bw)


def cross_entropy(logits, index):
    """Negative log-softmax of ``logits[index]``, max-shifted, one node."""
    if logits.ndim != 1:
        raise DimensionError(f"cross_entropy: need a logit vector, got shape {logits.shape}")
    index = int(index)
    if not 0 <= index < logits.shape[0]:
        raise ContractError(f"cross_entropy: index {index} outside {logits.shape[0]} classes")
    shifted = logits.data - logits.data.max()
    e = np.exp(shifted)
    total = e.sum()

    def bw(g):
        d = e * (float(g) / total)
        d[index] -= float(g)
        logits._accum(d)

    return _make(np.asarray(math.log(total) - shifted[index]), (logits,), bw)


# ---------------------------------------------------------------------------
# fused multi-head attention core
# ---------------------------------------------------------------------------

def attention(q, k, v, num_heads):
    """Scaled dot-product attention over already-projected q/k/v.

    All three are (T, d) with d divisible by num_heads; each head attends
    with scale 1/sqrt(d/num_heads).  Returns (output tensor, per-head
    attention weights as a plain (heads, T, T) array for tracing).
    Fused into one node to keep tapes short.
    """
    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"attention: q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    t_len, d = q.shape
    if d % num_heads != 0:
        raise DimensionError(f"attention: embed dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    sc = 1.0 / math.sqrt(dh)

    # Heads move to the leading axis so every step is one batched matmul.
    qh = q.data.reshape(t_len, num_heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(t_len, num_heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(t_len, num_heads, dh).transpose(1, 0, 2)
    s = qh @ kh.transpose(0, 2, 1)
    s *= sc
    s -= s.max(axis=-1, keepdims=True)
    weights = np.exp(s, out=s)
    weights /= weights.sum(axis=-1, keepdims=True)
    out_data = np.ascontiguousarray((weights @ vh).transpose(1, 0, 2)).reshape(t_len, d)

    def bw(g):
        gh = g.reshape(t_len, num_heads, dh).transpose(1, 0, 2)
        da = gh @ vh.transpose(0, 2, 1)
        da -= np.einsum("hij,hij->hi", da, weights)[..., None]
        da *= weights
        da *= sc
        ds = da
        if q.requires_grad:
            q._accum_owned(np.ascontiguousarray((ds @ kh).transpose(1, 0, 2)).reshape(t_len, d))
        if k.requires_grad:
            k._accum_owned(
                np.ascontiguousarray((ds.transpose(0, 2, 1) @ qh).transpose(1, 0, 2)).reshape(t_len, d)
            )
        if v.requires_grad:
            v._accum_owned(
                np.ascontiguousarray(
                    (weights.transpose(0, 2, 1) @ gh).transpose(1, 0, 2)
                ).reshape(t_len, d)
            )

    return _make(out_data, (q, k, v), bw), weights


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    per_param: dict = field(default_factory=dict)
    worst_param: str = ""
    max_rel_err: float = 0.0
    tol: float = 1e-4
    passed: bool = False

    def summary(self):
        state = "PASS" if self.passed else "FAIL"
        return (
            f"{state}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e}) "
            f"at {self.worst_param or '-'}"
        )


def grad_check(f, params, h=1e-6, tol=1e-4, floor=1e-3, corrupt=None):
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be deterministic and return a scalar Tensor built from the
    given name->Tensor mapping.  The step is kept small because piecewise
    activations make wider probes cross kinks and report phantom errors.
    Relative error per element is
    |a - n| / (floor + max(|a|, |n|)); the floor keeps finite-difference
    roundoff on near-zero gradients from reading as spurious failures.
    ``corrupt`` perturbs one analytic gradient (negative-control hook).
    """
    names = sorted(params)
    for name in names:
        params[name].zero_grad()
    loss = f()
    backward(loss)
    analytic = {}
    for name in names:
        g = params[name].grad
        if g is None:
            g = np.zeros_like(params[name].data)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite analytic gradient for {name}")
        analytic[name] = np.array(g, dtype=np.float64)
    if corrupt is not None:
        if corrupt not in analytic:
            raise ContractError(f"grad_check: unknown parameter {corrupt!r}")
        analytic[corrupt] = analytic[corrupt] + 1.0

    report = GradCheckReport(tol=tol)
    with no_grad():
        for name in names:
            p = params[name]
            flat = p.data.reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                f_plus = float(f().data)
                flat[i] = keep - h
                f_minus = float(f().data)
                flat[i] = keep
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = analytic[name].reshape(-1)[i]
                rel = abs(a - numeric) / (floor + max(abs(a), abs(numeric)))
                if rel > worst:
                    worst = rel
            report.per_param[name] = worst
            if worst > report.max_rel_err:
                report.max_rel_err = worst
                report.worst_param = name
    report.passed = report.max_rel_err < tol
    return report
