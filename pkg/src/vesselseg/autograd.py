"""Dense float tensors with reverse-mode automatic differentiation and Adam.

Activations follow the NCHW layout, convolution kernels are
(out_channels, in_channels, kh, kw), transposed-convolution kernels are
(in_channels, out_channels, kh, kw).  Training runs in float32; every
operation preserves the dtype of its inputs, so float64 graphs can be built
for high-precision checks.
"""

from __future__ import annotations

import numpy as np


class NumericalError(RuntimeError):
    """Raised when a non-finite value makes further training meaningless."""


class Tensor:
    """A dense n-d array that records how it was computed.

    ``grad`` is zero-initialized on gradient-tracking leaves and accumulated
    by summation during :func:`backward`; callers zero it explicitly between
    optimizer steps (see :func:`zero_grads`).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = arr.astype(dtype, copy=False)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        """A view of the same values with no graph history."""
        return Tensor(self.data, requires_grad=False)

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return rsub(self, other)


def _result(values, parents, backward_fn):
    """Wrap an op result, keeping graph edges only where gradients can flow."""
    needs = any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    if not isinstance(b, Tensor):
        c = float(b)

        def bw_scalar(g):
            if a.requires_grad:
                _accum(a, g)

        return _result(a.data + c, (a,), bw_scalar)
    _same_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _result(a.data + b.data, (a, b), bw)


def neg(a):
    def bw(g):
        if a.requires_grad:
            _accum(a, -g)

    return _result(-a.data, (a,), bw)


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    return add(a, neg(b))


def rsub(a, scalar):
    """scalar - a, elementwise."""
    c = float(scalar)

    def bw(g):
        if a.requires_grad:
            _accum(a, -g)

    return _result(c - a.data, (a,), bw)


def mul(a, b):
    if not isinstance(b, Tensor):
        c = float(b)

        def bw_scalar(g):
            if a.requires_grad:
                _accum(a, g * c)

        return _result(a.data * c, (a,), bw_scalar)
    _same_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _result(a.data * b.data, (a, b), bw)


def log(a):
    x = a.data

    def bw(g):
        if a.requires_grad:
            _accum(a, g / x)

    return _result(np.log(x), (a,), bw)


def clamp(a, lo, hi):
    """Clip values to [lo, hi]; gradient passes only strictly inside."""
    x = a.data

    def bw(g):
        if a.requires_grad:
            _accum(a, g * ((x > lo) & (x < hi)))

    return _result(np.clip(x, lo, hi), (a,), bw)


# ---------------------------------------------------------------------------
# activations

def relu(a):
    x = a.data

    def bw(g):
        if a.requires_grad:
            _accum(a, g * (x > 0))

    return _result(np.maximum(x, 0), (a,), bw)


def leaky_relu(a, alpha=0.2):
    x = a.data

    def bw(g):
        if a.requires_grad:
            _accum(a, np.where(x > 0, g, g * alpha))

    return _result(np.where(x > 0, x, x * alpha), (a,), bw)


_SIG_EPS = 1e-7


def sigmoid(a):
    """Numerically stable logistic, clipped into the open interval (0, 1)."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    np.clip(out, _SIG_EPS, 1.0 - _SIG_EPS, out=out)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * out * (1.0 - out))

    return _result(out, (a,), bw)


def activation(a, kind, alpha=0.2):
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, alpha)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops

def global_mean(a):
    """Arithmetic mean over every element, as a scalar tensor."""
    if a.data.size == 0:
        raise ValueError("global_mean: empty tensor")
    n = a.data.size

    def bw(g):
        if a.requires_grad:
            _accum(a, np.full_like(a.data, float(g) / n))

    return _result(a.data.mean(), (a,), bw)


def spatial_mean(a):
    """Mean over the two trailing spatial axes of an NCHW tensor."""
    if a.data.ndim != 4:
        raise ValueError(f"spatial_mean: expected 4-d input, got shape {a.data.shape}")
    n_hw = a.data.shape[2] * a.data.shape[3]

    def bw(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g / n_hw, a.data.shape))

    return _result(a.data.mean(axis=(2, 3), keepdims=True), (a,), bw)


def concat_channels(a, b):
    """Concatenate two NCHW tensors along the channel axis, a first."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError(
            f"concat_channels: expected 4-d inputs, got {a.data.shape} and {b.data.shape}"
        )
    sa, sb = a.data.shape, b.data.shape
    if sa[0] != sb[0] or sa[2:] != sb[2:]:
        raise ValueError(f"concat_channels: batch/spatial mismatch {sa} vs {sb}")
    ca = sa[1]

    def bw(g):
        if a.requires_grad:
            _accum(a, g[:, :ca])
        if b.requires_grad:
            _accum(b, g[:, ca:])

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), bw)


# ---------------------------------------------------------------------------
# convolution family

def _im2col(x, kh, kw, stride, padding):
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * kh * kw), ho, wo


def _col2im(cols2d, x_shape, kh, kw, stride, padding):
    n, c, h, w = x_shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = cols2d.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols2d.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if padding:
        return xp[:, :, padding : padding + h, padding : padding + w]
    return xp


def conv2d(x, kernel, bias, stride=1, padding=0):
    """2-d cross-correlation with zero padding, differentiable in all inputs."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(
            f"conv2d: expected 4-d input and kernel, got {x.data.shape} and {kernel.data.shape}"
        )
    n, cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if cin != kcin:
        raise ValueError(
            f"conv2d: input channels {x.data.shape} do not match kernel {kernel.data.shape}"
        )
    if bias.data.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} does not match ({cout},)")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(
            f"conv2d: padded input {x.data.shape} smaller than kernel {kernel.data.shape}"
        )

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wcol = kernel.data.reshape(cout, -1)
    out = (cols @ wcol.T + bias.data).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gr = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if kernel.requires_grad:
            _accum(kernel, (gr.T @ cols).reshape(kernel.data.shape))
        if bias.requires_grad:
            _accum(bias, gr.sum(axis=0))
        if x.requires_grad:
            _accum(x, _col2im(gr @ wcol, x.data.shape, kh, kw, stride, padding))

    return _result(out, (x, kernel, bias), bw)


def transposed_conv2d(x, kernel, bias, stride):
    """Stride-factor upsampling; the adjoint of conv2d with the same kernel.

    Requires kh == kw == stride so the output is exactly stride times the
    input spatially (the only configuration the models use).
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(
            f"transposed_conv2d: expected 4-d input and kernel, got {x.data.shape} and {kernel.data.shape}"
        )
    n, cin, h, w = x.data.shape
    kcin, cout, kh, kw = kernel.data.shape
    if cin != kcin:
        raise ValueError(
            f"transposed_conv2d: input channels {x.data.shape} do not match kernel {kernel.data.shape}"
        )
    if kh != stride or kw != stride:
        raise ValueError(
            f"transposed_conv2d: kernel {kh}x{kw} incompatible with stride {stride};"
            " need kh == kw == stride"
        )
    if bias.data.shape != (cout,):
        raise ValueError(f"transposed_conv2d: bias shape {bias.data.shape} does not match ({cout},)")

    s = stride
    out = np.einsum("ncij,coab->noiajb", x.data, kernel.data).reshape(n, cout, h * s, w * s)
    out = out + bias.data[None, :, None, None]

    def bw(g):
        g6 = g.reshape(n, cout, h, s, w, s)
        if x.requires_grad:
            _accum(x, np.einsum("noiajb,coab->ncij", g6, kernel.data))
        if kernel.requires_grad:
            _accum(kernel, np.einsum("ncij,noiajb->coab", x.data, g6))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))

    return _result(out, (x, kernel, bias), bw)


def maxpool2x2(x):
    """Disjoint 2x2 max pooling; gradient goes to the first max in scan order."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2x2: expected 4-d input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2: spatial size {h}x{w} must be even")
    win = (
        x.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        if not x.requires_grad:
            return
        g4 = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(g4, idx[..., None], g[..., None], axis=-1)
        dx = (
            g4.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        _accum(x, dx)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------------------
# backward pass

def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
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


def backward(loss):
    """Populate grads of every reachable gradient-tracking tensor.

    Gradients of a node used by several consumers sum; leaves keep whatever
    was already accumulated, so zero them between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    order = _topo_order(loss)
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(tensors):
    for t in tensors:
        if t.grad is not None:
            t.grad[...] = 0.0


# ---------------------------------------------------------------------------
# Adam

def adam_step(value, grad, m, v, t, lr, beta1, beta2, eps):
    """One bias-corrected Adam update for a single parameter array.

    Pure: returns (new_value, new_m, new_v, new_t) without touching inputs.
    """
    t = t + 1
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps), m, v, t


class Adam:
    """Adam over a named parameter list, updating tensors in place."""

    def __init__(self, named_params, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self):
        t_next = self.t
        for name, p in self.named_params:
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter '{name}'")
            new, self.m[name], self.v[name], t_next = adam_step(
                p.data, g, self.m[name], self.v[name], self.t, self.lr, self.beta1, self.beta2, self.eps
            )
            p.data = new
        self.t = t_next

    def zero_grad(self):
        zero_grads(p for _, p in self.named_params)

    def state_dict(self):
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.m = {k: np.asarray(v, dtype=np.float32).copy() for k, v in state["m"].items()}
        self.v = {k: np.asarray(v, dtype=np.float32).copy() for k, v in state["v"].items()}
