"""Minimal reverse-mode autodiff engine on numpy arrays.

Design: define-by-run.  Each op returns a new `Tensor` whose closure knows
how to push gradients into its parents; `Tensor.backward()` walks the graph
in reverse topological order and accumulates additively at fan-out.  The op
set is exactly what the depth networks and policies need: conv2d, group
norm, SELU/ReLU/sigmoid/tanh, linear, nearest-neighbour resize, adaptive
average pooling, concat, elementwise add/neg, mean, and the L1/L2 losses.
Min-pooling is provided for feature building but is not differentiated.

Ops preserve the input dtype, so the same code runs float32 for training
and float64 for gradient checking.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, TrainingFault

SELU_LAMBDA = 1.05070098
SELU_ALPHA = 1.67326324

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array plus an optional gradient and graph edge."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def has_nonfinite(self) -> bool:
        return not bool(np.isfinite(self.data).all())

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this value into every reachable parent."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ValueError(f"gradient shape {grad.shape} != value shape {self.data.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        _accumulate(self, grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, attaching the graph edge only when it can matter."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backward = backward
        return out
    return Tensor(data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(t: Tensor, what: str) -> None:
    """Raise TrainingFault if ``t`` contains NaN or Inf."""
    if t.has_nonfinite():
        raise TrainingFault(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# elementwise / shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _node(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _node(-a.data, (a,), backward)


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(dtype=a.data.dtype).reshape(())
    n = a.data.size

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.broadcast_to(g / n, a.shape).astype(a.data.dtype))

    return _node(out, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ConfigurationError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                _accumulate(p, g[tuple(sl)])

    return _node(out, tuple(parts), backward)


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, a.data.dtype.type(0))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.where(mask, g, g.dtype.type(0)))

    return _node(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    # clip keeps exp() in range for float32; sigmoid(+-60) saturates anyway
    z = np.clip(a.data, -60.0, 60.0)
    out = 1.0 / (1.0 + np.exp(-z))
    out = out.astype(a.data.dtype)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * out * (1.0 - out))

    return _node(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (1.0 - out * out))

    return _node(out, (a,), backward)


def selu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    dt = a.data.dtype
    lam = dt.type(SELU_LAMBDA)
    alpha = dt.type(SELU_ALPHA)
    pos = a.data > 0
    expx = np.exp(np.minimum(a.data, dt.type(0)))
    out = np.where(pos, lam * a.data, lam * alpha * (expx - dt.type(1)))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * np.where(pos, lam, lam * alpha * expx))

    return _node(out, (a,), backward)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "selu": selu}


def activation(kind: str, a: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}") from None
    return fn(a)


# ---------------------------------------------------------------------------
# linear / conv / norm


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight.T + bias, with weight [out, in] and x [..., in]."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or bias.ndim != 1 or weight.shape[0] != bias.shape[0]:
        raise ConfigurationError(f"bad linear params {weight.shape}, {bias.shape}")
    if x.shape[-1] != weight.shape[1]:
        raise ConfigurationError(f"linear input {x.shape} incompatible with weight {weight.shape}")
    single = x.ndim == 1
    xb = x.data[None, :] if single else x.data.reshape(-1, x.shape[-1])
    out = xb @ weight.data.T + bias.data
    out_shape = x.shape[:-1] + (weight.shape[0],)
    out = out.reshape(out_shape)

    def backward(g):
        gb = g.reshape(-1, weight.shape[0])
        if weight.requires_grad:
            _accumulate(weight, gb.T @ xb)
        if bias.requires_grad:
            _accumulate(bias, gb.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, (gb @ weight.data).reshape(x.shape))

    return _node(out, (x, weight, bias), backward)


def _conv_out_size(n: int, k: int, stride: int, pad: int, what: str) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ConfigurationError(
            f"conv {what}: size {n} with kernel {k}, stride {stride}, padding {pad} "
            "does not produce an integer output size"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Extract conv patches from padded input [N,C,H,W] as [N*OH*OW, C*kh*kw]."""
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N,C,OH,OW,kh,kw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                  stride: int, padding: int) -> tuple[np.ndarray, np.ndarray]:
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh = _conv_out_size(h, kh, stride, padding, "height")
    ow = _conv_out_size(wd, kw, stride, padding, "width")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols, oh2, ow2 = _im2col(xp, kh, kw, stride)
    assert (oh, ow) == (oh2, ow2)
    out = cols @ w.reshape(co, -1).T
    if b is not None:
        out = out + b
    y = out.reshape(n, oh, ow, co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), cols


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: int, padding: int,
                     in_hw: tuple[int, int]) -> np.ndarray:
    """Gradient w.r.t. conv input: transposed convolution of g with w."""
    n, co, oh, ow = g.shape
    _, ci, kh, kw = w.shape
    if stride > 1:
        gd = np.zeros((n, co, (oh - 1) * stride + 1, (ow - 1) * stride + 1), dtype=g.dtype)
        gd[:, :, ::stride, ::stride] = g
    else:
        gd = g
    ph, pw = kh - 1 - padding, kw - 1 - padding
    if ph < 0 or pw < 0:
        crop_h, crop_w = -min(ph, 0), -min(pw, 0)
        gd = gd[:, :, crop_h: gd.shape[2] - crop_h or None, crop_w: gd.shape[3] - crop_w or None]
        ph, pw = max(ph, 0), max(pw, 0)
    gp = np.pad(gd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    w_rot = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))  # [Ci,Co,kh,kw]
    cols, gh, gw = _im2col(gp, kh, kw, 1)
    dx = (cols @ w_rot.reshape(ci, -1).T).reshape(n, gh, gw, ci).transpose(0, 3, 1, 2)
    h, wd = in_hw
    return np.ascontiguousarray(dx[:, :, :h, :wd])


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over [C,H,W] or [N,C,H,W] input."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 4:
        raise ConfigurationError(f"conv weight must be 4-D, got {weight.shape}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"bad conv stride/padding: {stride}, {padding}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or xd.shape[1] != weight.shape[1]:
        raise ConfigurationError(f"conv input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ConfigurationError(f"conv bias {bias.shape} incompatible with weight {weight.shape}")
    in_hw = xd.shape[2], xd.shape[3]
    y, cols = _conv_forward(xd, weight.data, bias.data, stride, padding)
    co = weight.shape[0]

    def backward(g):
        gb = g[None] if single else g
        gmat = gb.transpose(0, 2, 3, 1).reshape(-1, co)
        if weight.requires_grad:
            _accumulate(weight, (gmat.T @ cols).reshape(weight.shape))
        if bias.requires_grad:
            _accumulate(bias, gb.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx = _conv_input_grad(gb, weight.data, stride, padding, in_hw)
            _accumulate(x, dx[0] if single else dx)

    return _node(y[0] if single else y, (x, weight, bias), backward)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise per sample over channel groups, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    n, c = xd.shape[0], xd.shape[1]
    if c % groups != 0:
        raise ConfigurationError(f"channels {c} not divisible by groups {groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(f"group_norm affine params must have shape ({c},)")
    dt = xd.dtype
    xg = xd.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True, dtype=dt)
    var = ((xg - mu) ** 2).mean(axis=2, keepdims=True, dtype=dt)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat_g = (xg - mu) * inv
    xhat = xhat_g.reshape(xd.shape)
    gshape = (1, c) + (1,) * (xd.ndim - 2)
    y = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)

    def backward(g):
        gb = g[None] if single else g
        axes = (0,) + tuple(range(2, xd.ndim))
        if gamma.requires_grad:
            _accumulate(gamma, (gb * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accumulate(beta, gb.sum(axis=axes))
        if x.requires_grad:
            dxhat = (gb * gamma.data.reshape(gshape)).reshape(n, groups, -1)
            m1 = dxhat.mean(axis=2, keepdims=True, dtype=dt)
            m2 = (dxhat * xhat_g).mean(axis=2, keepdims=True, dtype=dt)
            dxg = (dxhat - m1 - xhat_g * m2) * inv
            dx = dxg.reshape(xd.shape)
            _accumulate(x, dx[0] if single else dx)

    return _node(y[0] if single else y, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# resizing / pooling


def _nearest_index(n_out: int, n_in: int) -> np.ndarray:
    return (np.arange(n_out) * n_in) // n_out


def upsample_nearest(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbour resize of the last two axes to (out_h, out_w)."""
    x = as_tensor(x)
    h, w = x.shape[-2], x.shape[-1]
    if out_h < h or out_w < w:
        raise ConfigurationError(f"upsample target ({out_h},{out_w}) smaller than input ({h},{w})")
    rows = _nearest_index(out_h, h)
    cols = _nearest_index(out_w, w)
    out = x.data[..., rows[:, None], cols[None, :]]
    int_h = out_h % h == 0
    int_w = out_w % w == 0

    def backward(g):
        if not x.requires_grad:
            return
        if int_h and int_w:
            fh, fw = out_h // h, out_w // w
            dx = g.reshape(g.shape[:-2] + (h, fh, w, fw)).sum(axis=(-3, -1))
        else:
            # separable scatter-add: rows first, then columns
            lead = g.shape[:-2]
            gt = np.moveaxis(g, -2, 0).reshape(out_h, -1)
            tmp = np.zeros((h, gt.shape[1]), dtype=g.dtype)
            np.add.at(tmp, rows, gt)
            tmp = np.moveaxis(tmp.reshape((h,) + lead + (out_w,)), 0, -2)
            tt = np.moveaxis(tmp, -1, 0).reshape(out_w, -1)
            dxt = np.zeros((w, tt.shape[1]), dtype=g.dtype)
            np.add.at(dxt, cols, tt)
            dx = np.moveaxis(dxt.reshape((w,) + lead + (h,)), 0, -1)
        _accumulate(x, np.ascontiguousarray(dx))

    return _node(out, (x,), backward)


def _partition_bounds(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(n_out)
    starts = (idx * n_in) // n_out
    ends = -(-((idx + 1) * n_in) // n_out)  # ceil division
    return starts, ends


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average over near-even spatial partitions down to (out_h, out_w)."""
    x = as_tensor(x)
    h, w = x.shape[-2], x.shape[-1]
    if out_h > h or out_w > w or out_h < 1 or out_w < 1:
        raise ConfigurationError(f"pool target ({out_h},{out_w}) invalid for input ({h},{w})")
    rs, re = _partition_bounds(h, out_h)
    cs, ce = _partition_bounds(w, out_w)
    out = np.empty(x.shape[:-2] + (out_h, out_w), dtype=x.data.dtype)
    for i in range(out_h):
        for j in range(out_w):
            out[..., i, j] = x.data[..., rs[i]:re[i], cs[j]:ce[j]].mean(axis=(-2, -1))

    def backward(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        for i in range(out_h):
            for j in range(out_w):
                cnt = (re[i] - rs[i]) * (ce[j] - cs[j])
                dx[..., rs[i]:re[i], cs[j]:ce[j]] += (g[..., i, j] / cnt)[..., None, None]
        _accumulate(x, dx)

    return _node(out, (x,), backward)


def min_pool2d(x, out_h: int, out_w: int) -> Tensor:
    """Minimum over near-even partitions of a 2-D map.  Not differentiated."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim != 2:
        raise ConfigurationError(f"min_pool2d expects a 2-D map, got shape {data.shape}")
    h, w = data.shape
    if out_h > h or out_w > w or out_h < 1 or out_w < 1:
        raise ConfigurationError(f"pool target ({out_h},{out_w}) invalid for input ({h},{w})")
    rs, re = _partition_bounds(h, out_h)
    cs, ce = _partition_bounds(w, out_w)
    out = np.empty((out_h, out_w), dtype=data.dtype)
    for i in range(out_h):
        for j in range(out_w):
            out[i, j] = data[rs[i]:re[i], cs[j]:ce[j]].min()
    return Tensor(out)


# ---------------------------------------------------------------------------
# losses


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ConfigurationError(f"loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.abs(diff).mean(dtype=pred.data.dtype).reshape(())
    n = pred.data.size

    def backward(g):
        s = np.sign(diff) * (g / n)
        if pred.requires_grad:
            _accumulate(pred, s.astype(pred.data.dtype))
        if target.requires_grad:
            _accumulate(target, (-s).astype(target.data.dtype))

    return _node(out, (pred, target), backward)


def l2_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ConfigurationError(f"loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = (diff * diff).mean(dtype=pred.data.dtype).reshape(())
    n = pred.data.size

    def backward(g):
        s = diff * (2.0 * g / n)
        if pred.requires_grad:
            _accumulate(pred, s.astype(pred.data.dtype))
        if target.requires_grad:
            _accumulate(target, (-s).astype(target.data.dtype))

    return _node(out, (pred, target), backward)


_LOSSES = {"l1": l1_loss, "l2": l2_loss}


def loss(kind: str, pred: Tensor, target: Tensor) -> Tensor:
    try:
        fn = _LOSSES[kind]
    except KeyError:
        raise ConfigurationError(f"unknown loss {kind!r}") from None
    return fn(pred, target)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    """Per-parameter-list Adam moments plus the shared step counter."""
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """Apply one Adam update in place.  Missing gradients are a fault."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise TrainingFault("optimizer state does not match parameter list")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, p in enumerate(params):
        if p.grad is None:
            raise TrainingFault("adam_step on a parameter with no gradient")
        g = p.grad
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        mhat = state.m[i] / bc1
        vhat = state.v[i] / bc2
        p.data = p.data - (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


class Adam:
    """Convenience wrapper owning an AdamState for a fixed parameter list."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state)


# ---------------------------------------------------------------------------
# training control


class TrainSignal(Enum):
    CONTINUE = "continue"
    STOP = "stop"
    FAULT = "fault"


@dataclass
class TrainControl:
    """Epoch-level learning-rate decay and early stopping.

    ``update`` is called once per epoch with the validation loss.  The
    learning rate is multiplied by ``decay_factor`` every ``decay_every``
    epochs (0 disables decay).  Training stops after ``patience`` epochs
    without relative improvement of at least ``min_delta``.
    """
    lr: float
    decay_factor: float = 0.5
    decay_every: int = 0
    patience: int = 5
    min_delta: float = 1e-4
    epoch: int = 0
    best_loss: float = float("inf")
    epochs_since_improve: int = 0
    last_improved: bool = False

    def update(self, epoch_loss: float) -> TrainSignal:
        if not np.isfinite(epoch_loss):
            return TrainSignal.FAULT
        self.epoch += 1
        if self.decay_every > 0 and self.epoch % self.decay_every == 0:
            self.lr *= self.decay_factor
        threshold = self.best_loss - self.min_delta * abs(self.best_loss)
        if epoch_loss < threshold or self.best_loss == float("inf"):
            self.best_loss = epoch_loss
            self.epochs_since_improve = 0
            self.last_improved = True
        else:
            self.epochs_since_improve += 1
            self.last_improved = False
        if self.epochs_since_improve >= self.patience:
            return TrainSignal.STOP
        return TrainSignal.CONTINUE


def train_control_step(control: TrainControl, epoch_loss: float) -> TrainSignal:
    return control.update(epoch_loss)
