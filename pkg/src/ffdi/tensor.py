"""Minimal dense-tensor autodiff engine.

Covers exactly the operation set the FFDI network needs: 2-D (transposed)
convolution, channel/global pooling, linear layers, elementwise nonlinearities,
cross-entropy and sum-of-squares losses, and plain SGD with per-group learning
rates.  Arrays are numpy, layout N x C x H x W for feature maps.

Forward passes are recorded on a module-level tape; ``backward`` walks the tape
once in reverse and then clears it, so exactly one backward is allowed per
recorded forward.  Scalar loss reductions are carried in float64 regardless of
the activation dtype, which keeps loss bookkeeping (term decomposition) exact
while activations stay in single precision.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    """Set the dtype new tensors default to (float32 or float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dtype!r}")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A dense real array plus gradient bookkeeping.

    Leaf tensors created with ``requires_grad=True`` (parameters) eagerly hold
    a zero gradient buffer; op outputs allocate theirs lazily during backward.
    Data is immutable by convention once it has entered a forward pass, except
    for the in-place parameter update done by the optimizer between passes.
    """

    __slots__ = ("data", "grad", "requires_grad", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._op = None  # _Node that produced this tensor, if recorded

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
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def detach(self) -> "Tensor":
        """Same data, cut from the recorded graph (no gradient flows past it)."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    # Small operator surface for loss assembly and tests.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _Node:
    """One recorded forward op: output, inputs, and the gradient callback."""

    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class _Tape:
    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []


_TAPE = _Tape()
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops executed inside produce detached tensors."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make_output(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = None
    out.requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        node = _Node(out, [t for t in inputs if t.requires_grad], backward_fn)
        out._op = node
        _TAPE.nodes.append(node)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Reverse sweep from ``loss`` through the recorded tape, then clear it.

    Every ``requires_grad`` tensor on the path to ``loss`` accumulates
    dLoss/dTensor into ``.grad``; tensors off the path are untouched.  The tape
    is consumed: a second call without a new forward pass raises.
    """
    if loss._op is None:
        raise RuntimeError(
            "backward: loss is not attached to a recorded forward pass "
            "(already consumed by a previous backward, or built under no_grad)"
        )
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    nodes = _TAPE.nodes
    loss.grad = np.ones_like(loss.data)
    reached = {id(loss)}
    for node in reversed(nodes):
        if id(node.out) not in reached or node.out.grad is None:
            continue
        node.backward_fn(node.out.grad)
        for t in node.inputs:
            reached.add(id(t))
    for node in nodes:
        node.out._op = None
    nodes.clear()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise / shape ops
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        data = a.data + b

        def bwd(g, a=a):
            _accumulate(a, g)

        return _make_output(data, [a], bwd)
    data = a.data + b.data

    def bwd(g, a=a, b=b):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make_output(data, [a, b], bwd)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        data = a.data * b

        def bwd(g, a=a, b=b):
            _accumulate(a, g * b)

        return _make_output(data, [a], bwd)
    data = a.data * b.data

    def bwd(g, a=a, b=b):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make_output(data, [a, b], bwd)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def bwd(g, x=x, data=data):
        _accumulate(x, g * (data > 0))

    return _make_output(data, [x], bwd)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    data = np.empty_like(xd)
    pos = xd >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    data[~pos] = ex / (1.0 + ex)

    def bwd(g, x=x, data=data):
        _accumulate(x, g * data * (1.0 - data))

    return _make_output(data, [x], bwd)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    data = x.data.reshape(shape)

    def bwd(g, x=x, old=old):
        _accumulate(x, g.reshape(old))

    return _make_output(data, [x], bwd)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g, tensors=tuple(tensors), sizes=tuple(sizes), axis=axis):
        start = 0
        for t, s in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + s)
            _accumulate(t, g[tuple(sl)])
            start += s

    return _make_output(data, list(tensors), bwd)


def tensor_sum(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(dtype=np.float64))

    def bwd(g, x=x):
        _accumulate(x, np.full_like(x.data, float(g)))

    return _make_output(data, [x], bwd)


def sign_sqrt(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Signed square root, sign(x) * sqrt(|x|); grad clamped near zero."""
    ax = np.abs(x.data)
    data = np.sign(x.data) * np.sqrt(ax)

    def bwd(g, x=x, ax=ax):
        _accumulate(x, g * 0.5 / (np.sqrt(ax) + eps))

    return _make_output(data, [x], bwd)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise L2 normalization of an N x F matrix."""
    n = np.linalg.norm(x.data, axis=1, keepdims=True) + eps
    data = x.data / n

    def bwd(g, x=x, data=data, n=n):
        dot = (g * data).sum(axis=1, keepdims=True)
        _accumulate(x, (g - data * dot) / n)

    return _make_output(data, [x], bwd)


# ---------------------------------------------------------------------------
# Linear / convolution
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x (N, F) -> x @ weight.T + bias, weight (C, F), bias (C,)."""
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[1]} != weight width {weight.shape[1]}")
    data = x.data @ weight.data.T + bias.data

    def bwd(g, x=x, weight=weight, bias=bias):
        _accumulate(weight, g.T @ x.data)
        _accumulate(bias, g.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, g @ weight.data)

    return _make_output(data, [x, weight, bias], bwd)


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N*Ho*Wo, C*k*k) patch matrix."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, xp_shape: tuple, k: int, stride: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patches back onto the padded grid."""
    n, c, hp, wp = xp_shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    xp = np.zeros(xp_shape, dtype=cols.dtype)
    c6 = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    for a in range(k):
        for b in range(k):
            xp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += c6[..., a, b]
    return xp


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), zero padding, square kernel."""
    n, cin, h, w = x.shape
    cout, cin_w, k, k2 = weight.shape
    if k != k2:
        raise ValueError("conv2d: kernel must be square")
    if cin != cin_w:
        raise ValueError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError(f"conv2d: kernel {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = _conv_out_size(h, k, stride, padding)
    wo = _conv_out_size(w, k, stride, padding)
    xp = _pad2d(x.data, padding)
    cols = _im2col(xp, k, stride)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    out += bias.data
    data = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bwd(g, x=x, weight=weight, bias=bias, cols=cols, wmat=wmat,
            xp_shape=xp.shape, k=k, stride=stride, padding=padding, n=n, ho=ho, wo=wo):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, -1)
        _accumulate(weight, (gmat.T @ cols).reshape(weight.shape))
        _accumulate(bias, gmat.sum(axis=0))
        if x.requires_grad:
            dxp = _col2im(gmat @ wmat, xp_shape, k, stride)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            _accumulate(x, dxp)

    return _make_output(data, [x, weight, bias], bwd)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-D convolution; the adjoint of ``conv2d`` w.r.t. its input.

    ``weight`` is (Cin, Cout, k, k) with Cin the channel count of ``x``.
    Output spatial size is (H - 1) * stride - 2 * padding + k.
    """
    if stride < 1:
        raise ValueError("transposed_conv2d: stride must be >= 1")
    n, cin, h, w = x.shape
    cin_w, cout, k, k2 = weight.shape
    if k != k2:
        raise ValueError("transposed_conv2d: kernel must be square")
    if cin != cin_w:
        raise ValueError(f"transposed_conv2d: input has {cin} channels, weight expects {cin_w}")
    hf = (h - 1) * stride + k
    wf = (w - 1) * stride + k
    if hf - 2 * padding <= 0 or wf - 2 * padding <= 0:
        raise ValueError("transposed_conv2d: padding consumes the whole output")
    xmat = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, cin)
    wmat = weight.data.reshape(cin, cout * k * k)
    full = _col2im(xmat @ wmat, (n, cout, hf, wf), k, stride)
    if padding:
        full = full[:, :, padding:-padding, padding:-padding]
    data = full + bias.data[None, :, None, None]

    def bwd(g, x=x, weight=weight, bias=bias, xmat=xmat, wmat=wmat,
            k=k, stride=stride, padding=padding, n=n, h=h, w=w, cout=cout):
        gfull = _pad2d(g, padding)
        gcols = _im2col(gfull, k, stride)  # (n*h*w, cout*k*k)
        _accumulate(weight, (xmat.T @ gcols).reshape(weight.shape))
        _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx = (gcols @ wmat.T).reshape(n, h, w, -1).transpose(0, 3, 1, 2)
            _accumulate(x, dx)

    return _make_output(data, [x, weight, bias], bwd)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def channel_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, 2, H, W): per-position channel mean and channel max.

    The max routes its gradient to the first maximal channel at each position.
    """
    xd = x.data
    c = xd.shape[1]
    mean = xd.mean(axis=1, keepdims=True)
    amax = xd.argmax(axis=1)  # first index wins ties
    mx = np.take_along_axis(xd, amax[:, None], axis=1)
    data = np.concatenate([mean, mx], axis=1)

    def bwd(g, x=x, amax=amax, c=c):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, amax[:, None], g[:, 1:2], axis=1)
        dx += g[:, 0:1] / c
        _accumulate(x, dx)

    return _make_output(data, [x], bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    n, c, h, w = x.shape
    data = x.data.mean(axis=(2, 3))

    def bwd(g, x=x, h=h, w=w):
        _accumulate(x, np.broadcast_to(g[:, :, None, None], x.shape) / (h * w))

    return _make_output(data, [x], bwd)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized.

    Returns a float64 scalar tensor so that loss-term accounting stays exact.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"cross_entropy: expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= c:
        raise ValueError(f"cross_entropy: labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    data = np.asarray(-logp[np.arange(n), labels].mean(dtype=np.float64))

    def bwd(g, logits=logits, logp=logp, labels=labels, n=n):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        _accumulate(logits, d * (float(g) / n))

    return _make_output(data, [logits], bwd)


def mse(a: Tensor, b: Tensor, per_element: bool = False) -> Tensor:
    """Sum of squared differences per sample, averaged over samples.

    Axis 0 is the sample axis when the input has more than one axis; a 1-D
    input counts as a single sample.  With ``per_element=True`` the average
    runs over every element instead (per-pixel variant).  Returns a float64
    scalar tensor.
    """
    if a.shape != b.shape:
        raise ValueError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    denom = diff.size if per_element else (a.shape[0] if a.ndim > 1 else 1)
    data = np.asarray(np.square(diff, dtype=np.float64).sum() / denom)

    def bwd(g, a=a, b=b, diff=diff, denom=denom):
        d = diff * (2.0 * float(g) / denom)
        _accumulate(a, d)
        _accumulate(b, -d)

    return _make_output(data, [a, b], bwd)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def sgd_step(params: Iterable[Tensor], lr: float, weight_decay: float = 0.0) -> None:
    """p <- p - lr * (grad + weight_decay * p); gradients are zeroed after."""
    if lr <= 0:
        raise ValueError("sgd_step: lr must be positive")
    for p in params:
        g = p.grad
        if weight_decay:
            p.data -= lr * ((0 if g is None else g) + weight_decay * p.data)
        elif g is not None:
            p.data -= lr * g
        if g is not None:
            g[...] = 0


class Sgd:
    """SGD over parameter groups with step-decay milestones.

    ``groups`` is a list of ``{"params": [...], "lr": float}`` dicts; the decay
    multiplies every group's learning rate by ``decay`` when the just-finished
    iteration index (1-based) hits a milestone.
    """

    def __init__(self, groups, weight_decay: float = 0.0, milestones: Sequence[int] = (), decay: float = 0.1):
        self.groups = [{"params": list(g["params"]), "lr": float(g["lr"])} for g in groups]
        self.weight_decay = float(weight_decay)
        self.milestones = frozenset(int(m) for m in milestones)
        self.decay = float(decay)

    def step(self) -> None:
        for g in self.groups:
            sgd_step(g["params"], g["lr"], self.weight_decay)

    def apply_schedule(self, iteration: int) -> None:
        if iteration in self.milestones:
            for g in self.groups:
                g["lr"] *= self.decay

    def learning_rates(self) -> list[float]:
        return [g["lr"] for g in self.groups]
