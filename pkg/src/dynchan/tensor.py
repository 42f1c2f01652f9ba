"""Dense tensors with tape-free reverse-mode autodiff.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure computing the parents' adjoints. ``backward`` walks the graph once
in reverse topological order. Intermediate gradients are released after use
unless the tensor was flagged with :meth:`Tensor.retain_grad`, which is how
the saliency code keeps dL/dh for gated feature maps.
"""

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphError, NumericError, ShapeError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_retain")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = None
        self._parents = ()
        self._backward = None
        self._retain = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def retain_grad(self):
        """Keep this tensor's gradient after backward (saliency taps)."""
        self._retain = True
        return self

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        op = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{op})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def sum(self):
        return tsum(self)

    def backward(self):
        backward(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def backward(loss):
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``."""
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward on a tensor that is not attached to a graph")

    order = []
    seen = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        if not node._retain:
            node.grad = None


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at array ``x``.

    ``x`` is perturbed in place and restored; ``f`` is called with it.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    arr = x.data if isinstance(x, Tensor) else x
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("add", f"shapes {a.shape} and {b.shape} differ")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", f"shapes {a.shape} and {b.shape} differ")

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw, "mul")


def mul_scalar(x, c):
    c = float(c)

    def bw(g):
        _accumulate(x, g * c)

    return _make(x.data * x.data.dtype.type(c), (x,), bw, "mul_scalar")


def tsum(x):
    def bw(g):
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bw, "sum")


def relu(x):
    pos = x.data > 0

    def bw(g):
        _accumulate(x, g * pos)

    return _make(x.data * pos, (x,), bw, "relu")


def channel_mask_mul(x, mask):
    """Scale channel ``c`` of an N x C x H x W tensor by ``mask[c]``.

    The mask is a constant; no gradient flows into it.
    """
    m = np.asarray(mask, dtype=x.dtype)
    if x.ndim != 4 or m.shape != (x.shape[1],):
        raise ShapeError("channel_mask_mul", f"input {x.shape} vs mask {m.shape}")
    m4 = m[None, :, None, None]

    def bw(g):
        _accumulate(x, g * m4)

    return _make(x.data * m4, (x,), bw, "channel_mask_mul")


def flatten(x):
    shape = x.shape

    def bw(g):
        _accumulate(x, g.reshape(shape))

    return _make(x.data.reshape(shape[0], -1), (x,), bw, "flatten")


# ---------------------------------------------------------------- layers


def _windows(xp, k, stride):
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation, weight laid out C_out x C_in x k x k."""
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d", f"stride={stride} padding={padding}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", f"input {x.shape} / weight {weight.shape} must be 4-D")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c_in != c:
        raise ShapeError("conv2d", f"input has {c} channels, weight expects {c_in}")
    if kh != kw:
        raise ShapeError("conv2d", f"non-square kernel {kh}x{kw}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError("conv2d", f"bias {bias.shape} vs {c_out} output channels")
    k = kh
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ShapeError("conv2d", f"kernel {k} larger than padded input {hp}x{wp}")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = _windows(xp, k, stride)
    ho, wo = win.shape[2], win.shape[3]
    ck = c * k * k
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ck)
    w2 = weight.data.reshape(c_out, ck)
    out = (cols @ w2.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        if weight.requires_grad:
            _accumulate(weight, (g2.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros((n, hp, wp, c), dtype=xp.dtype)
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + hs:stride, j:j + ws:stride, :] += dcols[:, :, :, :, i, j]
            dxp = dxp.transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            _accumulate(x, np.ascontiguousarray(dxp))

    return _make(out, parents, bw, "conv2d")


def batchnorm2d(x, gamma, beta, running_mean, running_var, training=True,
                momentum=0.1, eps=1e-5, update_stats=True, update_mask=None):
    """Batch normalisation over N, H, W.

    In training mode the batch statistics normalise the input and, when
    ``update_stats`` is set, the running buffers (numpy arrays, modified in
    place) move by ``momentum``. ``update_mask`` restricts that update to the
    selected channels.
    """
    if x.ndim != 4:
        raise ShapeError("batchnorm2d", f"expected N x C x H x W input, got {x.shape}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ShapeError("batchnorm2d", f"{name} {t.shape} vs {c} channels")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError("batchnorm2d", f"running stats {running_mean.shape} vs {c} channels")
    xd = x.data
    g4 = gamma.data[None, :, None, None]

    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std[None, :, None, None]
        if update_stats:
            unbiased = var * (m / max(m - 1, 1))
            new_mean = (1 - momentum) * running_mean + momentum * mean
            new_var = (1 - momentum) * running_var + momentum * unbiased
            if update_mask is None:
                running_mean[...] = new_mean
                running_var[...] = new_var
            else:
                sel = np.asarray(update_mask, dtype=bool)
                running_mean[sel] = new_mean[sel]
                running_var[sel] = new_var[sel]
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    xhat = xhat.astype(xd.dtype, copy=False)
    out = g4 * xhat + beta.data[None, :, None, None]

    def bw(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * g4
            s4 = inv_std[None, :, None, None].astype(xd.dtype)
            if training:
                mean_d = dxhat.mean(axis=(0, 2, 3))[None, :, None, None]
                mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
                _accumulate(x, s4 * (dxhat - mean_d - xhat * mean_dx))
            else:
                _accumulate(x, dxhat * s4)

    return _make(out, (x, gamma, beta), bw, "batchnorm2d")


def maxpool2d(x, kernel, stride=None):
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise ShapeError("maxpool2d", f"expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ShapeError("maxpool2d", f"kernel {kernel} larger than input {h}x{w}")
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    kk = kernel * kernel

    if stride == kernel:
        xr = x.data[:, :, :ho * kernel, :wo * kernel].reshape(n, c, ho, kernel, wo, kernel)
        cols = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kk)
    else:
        cols = _windows(x.data, kernel, stride).reshape(n, c, ho, wo, kk)
    arg = cols.argmax(axis=-1)
    out = np.take_along_axis(cols, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        if stride == kernel:
            onehot = np.zeros((n, c, ho, wo, kk), dtype=g.dtype)
            np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
            blk = onehot.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
            dx = np.zeros_like(x.data)
            dx[:, :, :ho * kernel, :wo * kernel] = blk.reshape(n, c, ho * kernel, wo * kernel)
        else:
            dx = np.zeros_like(x.data)
            di, dj = np.divmod(arg, kernel)
            rows = np.arange(ho)[None, None, :, None] * stride + di
            cols_ = np.arange(wo)[None, None, None, :] * stride + dj
            nn_ = np.arange(n)[:, None, None, None]
            cc = np.arange(c)[None, :, None, None]
            np.add.at(dx, (nn_, cc, rows, cols_), g)
        _accumulate(x, dx)

    return _make(np.ascontiguousarray(out), (x,), bw, "maxpool2d")


def avgpool2d(x, kernel=None, stride=None):
    """Average pooling; ``kernel=None`` averages over the whole spatial extent."""
    if x.ndim != 4:
        raise ShapeError("avgpool2d", f"expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if kernel is None:
        if h != w:
            raise ShapeError("avgpool2d", f"global pooling needs square input, got {h}x{w}")
        kernel, stride = h, h
    stride = kernel if stride is None else stride
    if kernel > h or kernel > w:
        raise ShapeError("avgpool2d", f"kernel {kernel} larger than input {h}x{w}")
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    out = _windows(x.data, kernel, stride).mean(axis=(4, 5))
    scale = 1.0 / (kernel * kernel)

    def bw(g):
        dx = np.zeros_like(x.data)
        gs = g * scale
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(kernel):
            for j in range(kernel):
                dx[:, :, i:i + hs:stride, j:j + ws:stride] += gs
        _accumulate(x, dx)

    return _make(np.ascontiguousarray(out), (x,), bw, "avgpool2d")


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with weight laid out n_out x n_in."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("linear", f"input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("linear", f"bias {bias.shape} vs {weight.shape[0]} outputs")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        _accumulate(x, g @ weight.data)
        _accumulate(weight, g.T @ x.data)
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))

    return _make(out, parents, bw, "linear")


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError("softmax_cross_entropy", f"logits {logits.shape} vs {labels.shape[0]} labels")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError("softmax_cross_entropy", f"labels outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, labels]).mean()
    if not np.isfinite(loss):
        raise NumericError(f"softmax_cross_entropy produced {loss}")

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        _accumulate(logits, p * (g / n))

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "softmax_cross_entropy")


OPS = {
    "conv2d": conv2d,
    "batchnorm2d": batchnorm2d,
    "relu": relu,
    "maxpool2d": maxpool2d,
    "avgpool2d": avgpool2d,
    "linear": linear,
    "add": add,
    "mul": mul,
    "mul_scalar": mul_scalar,
    "channel_mask_mul": channel_mask_mul,
    "softmax_cross_entropy": softmax_cross_entropy,
    "flatten": flatten,
    "sum": tsum,
}


def forward_op(kind, *inputs, **attrs):
    """Dispatch to a registered op by name."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ShapeError(kind, "unknown op") from None
    return fn(*inputs, **attrs)
