"""Dense N-dimensional arrays with reverse-mode automatic differentiation.

The graph is a DAG of ``Tensor`` nodes; every operation that sees at least
one ``requires_grad`` input records its parents and a backward rule.
``Tensor.backward()`` walks the graph once in reverse topological order and
accumulates gradients additively across fan-out, which is what makes the
layer-edge and time-edge contributions of an unrolled spiking network fall
out of the chain rule instead of hand-coded update formulas.

Spike nonlinearities come in two flavors: ``spike`` is the exact Heaviside
step with a surrogate (arctan-shaped) backward, and ``smooth_spike`` is the
sigmoid-like arctan primitive itself with its exact derivative, used when a
network must be end-to-end finite-difference checkable.

Set the environment variable ``SPIKEFUSE_DEBUG_NAN=1`` to assert that every
operation output is finite.
"""

from __future__ import annotations

import contextlib
import math
import os
import threading

import numpy as np

from .errors import NumericError, ParameterError, ShapeError, StateError

DEFAULT_DTYPE = np.float32
SURROGATE_ALPHA = 2.0

# im2col patch buffers are capped at this many bytes; the conv kernels chunk
# the batch axis with a fixed formula so results stay run-to-run identical.
_PATCH_BUDGET_BYTES = 1 << 26

# Graph recording is per-thread: independent graphs may run on separate
# threads, and one thread's no_grad must not leak into another's training.
_tls = threading.local()
_debug_nan = bool(int(os.environ.get("SPIKEFUSE_DEBUG_NAN", "0") or "0"))


def _grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    prev = _grad_enabled()
    _tls.grad_enabled = False
    try:
        yield
    finally:
        _tls.grad_enabled = prev


def set_debug_nan(enabled: bool) -> None:
    global _debug_nan
    _debug_nan = bool(enabled)


def _coerce(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """A numpy-backed array value, optionally tracked by the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            _raise_scalar(self)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        """Populate ``grad`` on every reachable ``requires_grad`` leaf.

        The seed gradient is 1; repeated calls accumulate additively, use
        ``zero_grad`` between passes. The loss must be a scalar.
        """
        if self.data.size != 1:
            _raise_scalar(self)
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg

    # Operator sugar; every rule lives in the module-level functions below.
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


def _raise_scalar(t):
    raise ShapeError(f"expected a scalar tensor, got shape {t.shape}")


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _topo_order(root: Tensor):
    """Reverse topological order over requires_grad nodes, iterative so deep
    time-unrolled graphs never hit the recursion limit."""
    order = []
    visited = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        for parent in parents:
            if parent.requires_grad and id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                break
        else:
            order.append(node)
            stack.pop()
    order.reverse()
    return order


def _result(data: np.ndarray, parents, backward_fn) -> Tensor:
    if _debug_nan and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by an operation")
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting elementwise product (alias of ``mul``)."""
    return mul(a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    return _result(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    return _result(
        a.data**e,
        (a,),
        lambda g: (g * e * a.data ** (e - 1.0),),
    )


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    return _result(out_data, (a,), lambda g: (g * 0.5 / out_data,))


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign for overflow-free evaluation at float32.
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(x.dtype, copy=False)
    return _result(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),))


def relu(a: Tensor) -> Tensor:
    return _result(
        np.maximum(a.data, 0.0).astype(a.dtype, copy=False),
        (a,),
        lambda g: (g * (a.data > 0),),
    )


# ---------------------------------------------------------------------------
# spike nonlinearities


def spike(v: Tensor, v_th: float, alpha: float = SURROGATE_ALPHA) -> Tensor:
    """Heaviside threshold producing exact 0/1 values.

    Backward uses the arctan surrogate slope
    ``(alpha/2) / (1 + ((pi/2) * alpha * (v - v_th))**2)``.
    """
    out_data = (v.data >= v_th).astype(v.dtype)

    def backward(g):
        z = (math.pi / 2.0) * alpha * (v.data - v_th)
        return (g * (alpha / 2.0) / (1.0 + z * z),)

    return _result(out_data, (v,), backward)


def smooth_spike(v: Tensor, v_th: float, alpha: float = SURROGATE_ALPHA) -> Tensor:
    """Smooth surrogate activation in (0, 1); forward is the arctan curve the
    ``spike`` backward is derived from, so analytic and finite-difference
    gradients of a network built on this op agree."""
    z = (math.pi / 2.0) * alpha * (v.data - v_th)
    out_data = (np.arctan(z) / math.pi + 0.5).astype(v.dtype, copy=False)

    def backward(g):
        zz = (math.pi / 2.0) * alpha * (v.data - v_th)
        return (g * (alpha / 2.0) / (1.0 + zz * zz),)

    return _result(out_data, (v,), backward)


def dropout(x: Tensor, rate: float, mask: np.ndarray, training: bool = True) -> Tensor:
    """Multiply by a caller-supplied 0/1 mask scaled by 1/(1-rate).

    The mask is provided explicitly so a layer can hold it fixed across
    timesteps. Identity when not training.
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training:
        return x
    mask = np.asarray(mask)
    if mask.shape != x.shape and np.broadcast_shapes(mask.shape, x.shape) != x.shape:
        raise ShapeError(f"dropout mask shape {mask.shape} does not broadcast to input {x.shape}")
    scaled = (mask / (1.0 - rate)).astype(x.dtype)
    return mul(x, Tensor(scaled))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _result(out_data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out_data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype, copy=False),)

    return _result(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, index) -> Tensor:
    out_data = a.data[index]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, index, g)
        return (buf,)

    return _result(out_data, (a,), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack of zero tensors")
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ShapeError(f"stack: mismatched shapes {first} vs {t.shape}")
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out_data, tuple(tensors), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _result(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


# ---------------------------------------------------------------------------
# neural-network kernels


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map: ``x [B,F] @ weight[O,F].T + bias[O]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out_data = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
        out_data = out_data + bias.data

    if bias is None:
        return _result(out_data, (x, weight), lambda g: (g @ weight.data, g.T @ x.data))
    return _result(
        out_data,
        (x, weight, bias),
        lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)),
    )


def _conv_out_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _patch_index(hp, wp, k, stride, h_out, w_out):
    """Flat indices into an (hp, wp) grid for every k*k window, [L, k*k]."""
    r0 = np.arange(h_out) * stride
    c0 = np.arange(w_out) * stride
    rows = r0[:, None] + np.arange(k)[None, :]  # [h_out, k]
    cols = c0[:, None] + np.arange(k)[None, :]  # [w_out, k]
    flat = rows[:, None, :, None] * wp + cols[None, :, None, :]
    return flat.reshape(h_out * w_out, k * k)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with square kernels.

    ``x`` is [B, Cin, H, W], ``weight`` [Cout, Cin, k, k], ``bias`` [Cout].
    Output spatial size is ``floor((n + 2p - k)/stride) + 1`` per axis.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input/weight, got {x.shape}, {weight.shape}")
    b, cin, h, w = x.shape
    cout, cin_w, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d: non-square kernel {k}x{k2}")
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if stride < 1:
        raise ParameterError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ParameterError(f"conv2d: padding must be non-negative, got {padding}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded extent ({h + 2 * padding}, {w + 2 * padding})")

    h_out = _conv_out_size(h, k, stride, padding)
    w_out = _conv_out_size(w, k, stride, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    patch = _patch_index(hp, wp, k, stride, h_out, w_out)  # [L, kk]
    l, kk = patch.shape
    w_flat = weight.data.reshape(cout, cin * kk)

    # Fixed-formula batch chunking keeps the gather buffer bounded and the
    # arithmetic identical from run to run.
    per_sample = l * cin * kk * x.data.itemsize
    chunk = max(1, _PATCH_BUDGET_BYTES // max(per_sample, 1))

    def gather(xdata, lo, hi):
        part = xdata[lo:hi]
        if padding:
            part = np.pad(part, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = part.reshape(hi - lo, cin, hp * wp)[:, :, patch]  # [n, cin, L, kk]
        return cols.transpose(0, 2, 1, 3).reshape(hi - lo, l, cin * kk)

    out_data = np.empty((b, cout, h_out, w_out), dtype=x.dtype)
    for lo in range(0, b, chunk):
        hi = min(lo + chunk, b)
        cols = gather(x.data, lo, hi)
        prod = cols @ w_flat.T  # [n, L, cout]
        out_data[lo:hi] = prod.transpose(0, 2, 1).reshape(hi - lo, cout, h_out, w_out)
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias {bias.shape} incompatible with weight {weight.shape}")
        out_data += bias.data[None, :, None, None]

    def backward(g):
        gl_all = g.transpose(0, 2, 3, 1).reshape(b, l, cout)
        dw = np.zeros_like(w_flat)
        dx = np.zeros_like(x.data)
        arange_cache = np.arange(0)
        for lo in range(0, b, chunk):
            hi = min(lo + chunk, b)
            cols = gather(x.data, lo, hi)
            gl = gl_all[lo:hi]
            dw += np.tensordot(gl, cols, axes=([0, 1], [0, 1]))
            dcols = (gl @ w_flat).reshape(hi - lo, l, cin, kk).transpose(0, 2, 1, 3)
            dpad = np.zeros(((hi - lo) * cin, hp * wp), dtype=g.dtype)
            if arange_cache.shape[0] != (hi - lo) * cin:
                arange_cache = np.arange((hi - lo) * cin)
            np.add.at(
                dpad,
                (arange_cache[:, None], patch.reshape(1, l * kk)),
                dcols.reshape((hi - lo) * cin, l * kk),
            )
            dpad = dpad.reshape(hi - lo, cin, hp, wp)
            if padding:
                dpad = dpad[:, :, padding:-padding, padding:-padding]
            dx[lo:hi] = dpad
        grads = [dx, dw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out_data, parents, backward)


def avgpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k*k mean pooling; extents must be divisible by k."""
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d: need 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    if k < 1:
        raise ParameterError(f"avgpool2d: k must be positive, got {k}")
    if h % k or w % k:
        raise ShapeError(f"avgpool2d: extents ({h}, {w}) not divisible by {k}")
    out_data = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        expanded = np.broadcast_to(
            g[:, :, :, None, :, None] / (k * k), (b, c, h // k, k, w // k, k)
        )
        return (expanded.reshape(b, c, h, w).astype(x.dtype, copy=False),)

    return _result(out_data, (x,), backward)


class BatchNormState:
    """Running statistics for one batch-norm site."""

    __slots__ = ("mean", "var", "initialized")

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.initialized = False


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of a [B, C, H, W] tensor.

    Training mode normalizes with batch statistics over (B, H, W) and folds
    them into ``state`` as ``momentum * old + (1 - momentum) * batch`` (the
    running variance uses the unbiased estimate). Eval mode normalizes with
    the stored statistics and raises if none were ever computed.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm: need 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must be shape ({c},)")

    gamma4 = reshape(gamma, (1, c, 1, 1))
    beta4 = reshape(beta, (1, c, 1, 1))
    if training:
        m = tmean(x, axis=(0, 2, 3), keepdims=True)
        centered = sub(x, m)
        var = tmean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
        denom = sqrt(add(var, Tensor(np.asarray(eps, dtype=x.dtype))))
        xhat = div(centered, denom)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        unbias = n / (n - 1) if n > 1 else 1.0
        # in-place so captured references (checkpointing) stay valid
        state.mean[...] = momentum * state.mean + (1.0 - momentum) * m.data.reshape(c)
        state.var[...] = momentum * state.var + (1.0 - momentum) * unbias * var.data.reshape(c)
        state.initialized = True
    else:
        if not state.initialized:
            raise StateError("batchnorm: eval mode requested before any statistics exist")
        rm = Tensor(state.mean.reshape(1, c, 1, 1).astype(x.dtype))
        rstd = Tensor(np.sqrt(state.var.reshape(1, c, 1, 1).astype(x.dtype) + eps))
        xhat = div(sub(x, rm), rstd)
    return add(mul(gamma4, xhat), beta4)


# ---------------------------------------------------------------------------
# parameter initialization


def kaiming_uniform(shape, fan_in: int, rng, dtype=DEFAULT_DTYPE) -> Tensor:
    """ReLU-gain Kaiming-uniform draw: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = math.sqrt(6.0 / fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def zeros_param(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
