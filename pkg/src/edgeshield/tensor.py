"""Dense tensors with reverse-mode automatic differentiation.

Enough of an autodiff engine to train the lab's CNNs and to take loss
gradients w.r.t. input pixels for FGSM: conv2d, max-pooling, dense layers,
ReLU, batch normalization, a fused softmax cross-entropy, and an Adam
optimizer. Everything is float32 by default; float64 is supported so
finite-difference tests can upcast.

Every op validates that its output is finite — a NaN/Inf anywhere is treated
as a hard error rather than something to propagate silently.
"""

import threading

import numpy as np

from edgeshield import backend

DEFAULT_DTYPE = np.float32
_SUPPORTED_DTYPES = (np.float32, np.float64)
_LOG_FLOOR = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (inference paths)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _check_finite(data, op_name):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op_name}")


class OpRecord:
    """One executed primitive op: inputs, output, and its backward rule."""

    __slots__ = ("name", "inputs", "backward_fn", "output")

    def __init__(self, name, inputs, backward_fn):
        self.name = name
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.output = None


class Tensor:
    """Dense n-dimensional array, optionally participating in the grad tape."""

    __slots__ = ("data", "grad", "requires_grad", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _SUPPORTED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = None

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

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor_like(other, self))

    def __radd__(self, other):
        return add(_as_tensor_like(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor_like(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor_like(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor_like(other, self))

    def __rmul__(self, other):
        return mul(_as_tensor_like(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tensor_sum(self)


def _as_tensor_like(value, ref):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=ref.dtype))


def _result(data, inputs, backward_fn, name):
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = None
    out.requires_grad = False
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        rec = OpRecord(name, tuple(inputs), backward_fn)
        rec.output = out
        out.op = rec
    return out


class Tape:
    """Ops reachable from a root tensor, in a valid topological order."""

    def __init__(self, ops):
        self.ops = ops

    def __len__(self):
        return len(self.ops)

    @classmethod
    def trace(cls, root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t.op is None:
                continue
            if expanded:
                order.append(t.op)
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            stack.append((t, True))
            for inp in t.op.inputs:
                stack.append((inp, False))
        return cls(order)


def backward(loss, leaves=None):
    """Populate ``.grad`` on every requires_grad leaf below ``loss``.

    ``loss`` must be a scalar produced by recorded ops. Gradients accumulate
    into existing ``.grad`` buffers, so repeated calls without resetting sum
    their results. Leaves passed via ``leaves`` that the graph never touched
    are given an all-zero gradient.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.op is None:
        raise RuntimeError("backward on a tensor with no recorded ops (no tape)")
    tape = Tape.trace(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.ops):
        gout = grads.pop(id(rec.output), None)
        if gout is None:
            continue
        for inp, g in zip(rec.inputs, rec.backward_fn(gout)):
            if g is None or not inp.requires_grad:
                continue
            if inp.op is None:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += g
            else:
                acc = grads.get(id(inp))
                grads[id(inp)] = g if acc is None else acc + g
    if leaves is not None:
        for leaf in leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def _unbroadcast(grad, shape):
    # reduce a broadcasted gradient back to the original operand shape
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    def back(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    def back(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _result(a.data - b.data, (a, b), back, "sub")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    def back(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _result(a.data * b.data, (a, b), back, "mul")


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D tensors")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _result(a.data @ b.data, (a, b), back, "matmul")


def reshape(a, shape):
    old = a.shape

    def back(g):
        return (g.reshape(old),)

    return _result(a.data.reshape(shape), (a,), back, "reshape")


def tensor_sum(a):
    def back(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), back, "sum")


def relu(a):
    mask = a.data > 0  # subgradient at exactly 0 is 0

    def back(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0), (a,), back, "relu")


def dense(x, w, b):
    """Affine map: (N,F) @ (F,U) + (U,)."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ValueError("dense expects x (N,F), weight (F,U), bias (U,)")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(
            f"dense shape mismatch: x {x.shape}, weight {w.shape}, bias {b.shape}"
        )

    def back(g):
        return (
            g @ w.data.T if x.requires_grad else None,
            x.data.T @ g if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return _result(x.data @ w.data + b.data, (x, w, b), back, "dense")


def conv2d(x, w, b, stride=1, padding=0):
    """2-D cross-correlation of NCHW input with OIHW filters plus bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIHW weight")
    if b.ndim != 1 or b.shape[0] != w.shape[0]:
        raise ValueError("conv2d bias must have one entry per output channel")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise ValueError("conv2d requires stride >= 1 and padding >= 0")
    kh, kw = w.shape[2], w.shape[3]
    oh = (x.shape[2] + 2 * padding - kh) // stride + 1
    ow = (x.shape[3] + 2 * padding - kw) // stride + 1
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw or oh < 1 or ow < 1:
        raise ValueError("conv2d output extent is non-positive")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    xp = np.ascontiguousarray(xp)
    wd = np.ascontiguousarray(w.data)
    out = backend.kernels.conv2d_forward(xp, wd, b.data, stride)

    def back(g):
        g = np.ascontiguousarray(g)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = backend.kernels.conv2d_backward_input(g, wd, xp.shape, stride)
            if padding:
                gx = gxp[:, :, padding:-padding, padding:-padding]
            else:
                gx = gxp
        if w.requires_grad:
            gw = backend.kernels.conv2d_backward_weight(g, xp, w.shape, stride)
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    return _result(out, (x, w, b), back, "conv2d")


def maxpool2d(x, window, stride):
    """Max over window×window patches; gradient routes to the first argmax."""
    if x.ndim != 4:
        raise ValueError("maxpool2d expects an NCHW tensor")
    if window < 1 or stride < 1:
        raise ValueError("maxpool2d requires window >= 1 and stride >= 1")
    if window > x.shape[2] or window > x.shape[3]:
        raise ValueError(
            f"maxpool2d window {window} larger than spatial extents {x.shape[2:]}"
        )
    xd = np.ascontiguousarray(x.data)
    out, arg = backend.kernels.maxpool2d_forward(xd, window, stride)

    def back(g):
        g = np.ascontiguousarray(g)
        return (backend.kernels.maxpool2d_backward(g, arg, x.shape),)

    return _result(out, (x,), back, "maxpool2d")


class BatchNormState:
    """Running per-channel mean/variance used in infer mode."""

    def __init__(self, channels, dtype=DEFAULT_DTYPE):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def copy(self):
        out = BatchNormState(len(self.mean), dtype=self.mean.dtype)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batchnorm2d(x, gamma, beta, state, mode, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Channel-wise batch normalization over an NCHW tensor.

    Train mode normalizes with batch statistics and folds them into the
    running state (``running = momentum * running + (1 - momentum) * batch``);
    infer mode normalizes with the running state.
    """
    if x.ndim != 4:
        raise ValueError("batchnorm2d expects an NCHW tensor")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("batchnorm2d gamma/beta must be (C,)")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    def expand(v):
        return v.reshape(1, c, 1, 1)

    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise ValueError("batchnorm2d train mode needs N*H*W >= 2")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - expand(mu)) * expand(inv)
        state.mean = (momentum * state.mean + (1.0 - momentum) * mu).astype(x.dtype)
        state.var = (momentum * state.var + (1.0 - momentum) * var).astype(x.dtype)

        def back(g):
            ggamma = gbeta = gx = None
            if gamma.requires_grad:
                ggamma = (g * xhat).sum(axis=(0, 2, 3))
            if beta.requires_grad:
                gbeta = g.sum(axis=(0, 2, 3))
            if x.requires_grad:
                gxhat = g * expand(gamma.data)
                s1 = gxhat.sum(axis=(0, 2, 3))
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3))
                gx = (expand(inv) / m) * (m * gxhat - expand(s1) - xhat * expand(s2))
            return (gx, ggamma, gbeta)

    else:
        inv = 1.0 / np.sqrt(state.var + eps)
        xhat = (x.data - expand(state.mean)) * expand(inv)

        def back(g):
            ggamma = gbeta = gx = None
            if gamma.requires_grad:
                ggamma = (g * xhat).sum(axis=(0, 2, 3))
            if beta.requires_grad:
                gbeta = g.sum(axis=(0, 2, 3))
            if x.requires_grad:
                gx = g * expand(gamma.data * inv)
            return (gx, ggamma, gbeta)

    y = expand(gamma.data) * xhat + expand(beta.data)
    return _result(y.astype(x.dtype, copy=False), (x, gamma, beta), back, "batchnorm2d")


def global_avg_pool(x):
    """Spatial mean: (N,C,H,W) -> (N,C)."""
    if x.ndim != 4:
        raise ValueError("global_avg_pool expects an NCHW tensor")
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] * scale, x.shape).astype(x.dtype, copy=True),)

    return _result(x.data.mean(axis=(2, 3)), (x,), back, "global_avg_pool")


def concat(tensors, axis=1):
    """Concatenate along an axis; backward slices the gradient back apart."""
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for k, t in enumerate(tensors):
            if t.requires_grad:
                slicer[axis] = slice(offsets[k], offsets[k + 1])
                grads.append(np.ascontiguousarray(g[tuple(slicer)]))
            else:
                grads.append(None)
        return tuple(grads)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


def softmax(x, axis=-1):
    """Numerically stable softmax (max-subtracted)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _result(y, (x,), back, "softmax")


def _validate_onehot(onehot):
    d = onehot.data
    if d.ndim != 2:
        raise ValueError("one-hot labels must be 2-D (N,K)")
    ok = np.all((d == 0) | (d == 1)) and np.all(d.sum(axis=1) == 1)
    if not ok:
        raise ValueError("invalid one-hot row: each row must contain a single 1")


def softmax_cross_entropy(logits, onehot):
    """Mean categorical cross-entropy of softmax(logits) against one-hot rows.

    Gradient w.r.t. logits is (softmax - onehot) / N. The log is floored at
    1e-12 so saturated logits cannot produce infinities.
    """
    if logits.ndim != 2:
        raise ValueError("softmax_cross_entropy expects logits of shape (N,K)")
    _validate_onehot(onehot)
    if logits.shape != onehot.shape:
        raise ValueError(
            f"logits shape {logits.shape} does not match labels shape {onehot.shape}"
        )
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    p = e / denom
    logp = z - np.log(denom)
    logp = np.maximum(logp, np.log(_LOG_FLOOR))
    loss = np.asarray(-(onehot.data * logp).sum() / n, dtype=logits.dtype)

    def back(g):
        gl = None
        if logits.requires_grad:
            gl = (g * (p - onehot.data) / n).astype(logits.dtype, copy=False)
        return (gl, None)

    return _result(loss, (logits, onehot), back, "softmax_cross_entropy")


def one_hot(labels, num_classes, dtype=DEFAULT_DTYPE):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be 1-D")
    if labels.min(initial=0) < 0 or (labels.size and labels.max() >= num_classes):
        raise ValueError("label out of range")
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


class AdamState:
    """Per-parameter first/second moment buffers, persisted across steps."""

    def __init__(self):
        self.m = {}
        self.v = {}


def adam_step(params, state, *, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over ``params`` (in place)."""
    if t < 1:
        raise ValueError("adam_step requires t >= 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        if p.grad is None:
            raise RuntimeError("missing gradient on a registered parameter")
        g = p.grad
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[key]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[key] = m
        state.v[key] = v
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


class Adam:
    """Adam optimizer bound to a parameter list; ``lr`` may be lowered between steps."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()
        self.t = 0

    def step(self):
        self.t += 1
        adam_step(
            self.params,
            self.state,
            t=self.t,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )

    def zero_grad(self):
        for p in self.params:
            p.grad = None
