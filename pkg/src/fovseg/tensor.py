"""Small reverse-mode autodiff engine over numpy arrays.

Only the operators needed by the foveation and segmentation networks are
provided. Image tensors use NHWC layout; all arithmetic is float64 unless a
caller explicitly passes another dtype.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError

IGNORE = 255
LOG_FLOOR = -30.0
BN_EPS = 1e-5


class DiffTensor:
    """A value plus gradient node in the autodiff graph."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "name", "meta")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        parents: Sequence["DiffTensor"] = (),
        backward: Optional[Callable[[], None]] = None,
        name: Optional[str] = None,
        dtype=np.float64,
    ):
        self.values = np.asarray(values, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name
        self.meta: dict = {}

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.values.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad[...] = 0.0

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.values)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.values.size != 1:
                raise ContractError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.values)
        order = _topological_order(self)
        for node in order:
            if node._parents:
                node.grad[...] = 0.0
        self.grad += grad
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # operator sugar, used sparingly by the network code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _topological_order(root: DiffTensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def parameter(values, name=None) -> DiffTensor:
    return DiffTensor(values, requires_grad=True, name=name)


def _result(values, parents, backward) -> DiffTensor:
    needs = any(p.requires_grad for p in parents)
    out = DiffTensor(values, requires_grad=needs, parents=parents if needs else ())
    if needs:
        out._backward = lambda: backward(out.grad)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)

    return _result(a.values + b.values, (a, b), backward)


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.values, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.values, b.shape)

    return _result(a.values * b.values, (a, b), backward)


def scale(a: DiffTensor, c: float) -> DiffTensor:
    def backward(g):
        a.grad += g * c

    return _result(a.values * c, (a,), backward)


def total(a: DiffTensor) -> DiffTensor:
    def backward(g):
        a.grad += g

    return _result(a.values.sum(), (a,), backward)


def mean(a: DiffTensor) -> DiffTensor:
    n = a.values.size

    def backward(g):
        a.grad += g / n

    return _result(a.values.mean(), (a,), backward)


def relu(a: DiffTensor) -> DiffTensor:
    mask = a.values > 0

    def backward(g):
        a.grad += g * mask

    return _result(a.values * mask, (a,), backward)


def log_clamped(a: DiffTensor, floor: float = LOG_FLOOR) -> DiffTensor:
    """``max(log a, floor)``; the gradient is zero where the floor is active."""
    with np.errstate(divide="ignore"):
        raw = np.log(a.values)
    live = raw > floor
    out = np.where(live, raw, floor)

    def backward(g):
        safe = np.where(live, a.values, 1.0)
        a.grad += np.where(live, g / safe, 0.0)

    return _result(out, (a,), backward)


def softmax_channel(a: DiffTensor) -> DiffTensor:
    """Softmax over the last axis."""
    z = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        a.grad += p * (g - (g * p).sum(axis=-1, keepdims=True))

    return _result(p, (a,), backward)


def concat(tensors: Sequence[DiffTensor], axis: int = -1) -> DiffTensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.values for t in tensors], axis=axis)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.grad += g[tuple(idx)]

    return _result(out, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# convolution and normalisation
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo, c = win.shape[:4]
    # (n, ho, wo, c, ki, kj) -> (n*ho*wo, c*ki*kj); weights are permuted to match
    return win.reshape(n * ho * wo, c * k * k)


def conv2d(x: DiffTensor, w: DiffTensor, stride: int = 1, padding: int = 0) -> DiffTensor:
    """Cross-correlation of NHWC ``x`` with ``w`` of shape (k, k, Cin, Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.values.ndim != 4 or w.values.ndim != 4:
        raise ContractError(f"conv2d expects 4-d input and weights, got {x.shape} and {w.shape}")
    k, k2, cin, cout = w.shape
    if k != k2 or k % 2 == 0:
        raise ContractError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    if x.shape[3] != cin:
        raise ContractError(f"conv2d channel mismatch: input has {x.shape[3]}, weights expect {cin}")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d needs stride >= 1 and padding >= 0")
    n, h, wd, _ = x.shape
    p = padding
    xp = np.pad(x.values, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.values
    hp, wp = h + 2 * p, wd + 2 * p
    if hp < k or wp < k:
        raise ContractError("conv2d input smaller than kernel")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = _im2col(xp, k, stride)
    wmat = w.values.transpose(2, 0, 1, 3).reshape(cin * k * k, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        if w.requires_grad:
            w.grad += (cols.T @ g2).reshape(cin, k, k, cout).transpose(1, 2, 0, 3)
        if x.requires_grad:
            dxp = np.zeros((n, hp, wp, cin))
            rs = (ho - 1) * stride + 1
            cs = (wo - 1) * stride + 1
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + rs:stride, j:j + cs:stride, :] += g @ w.values[i, j].T
            x.grad += dxp[:, p:p + h, p:p + wd, :] if p else dxp

    return _result(out, (x, w), backward)


class BatchNormState:
    """Running moments for one batch-normalisation layer."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum


def batchnorm(
    x: DiffTensor,
    gamma: DiffTensor,
    beta: DiffTensor,
    state: BatchNormState,
    mode: str = "train",
    eps: float = BN_EPS,
) -> DiffTensor:
    """Per-channel normalisation over every axis but the last."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ContractError(f"batchnorm gamma/beta must have shape ({c},)")
    axes = tuple(range(x.values.ndim - 1))
    if mode == "train":
        mu = x.values.mean(axis=axes)
        var = x.values.var(axis=axes)
        m = x.values.size // c
        unbiased = var * m / max(m - 1, 1)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
    elif mode == "eval":
        mu, var = state.running_mean, state.running_var
    else:
        raise ContractError(f"unknown batchnorm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    out = gamma.values * xhat + beta.values

    def backward(g):
        if gamma.requires_grad:
            gamma.grad += (g * xhat).sum(axis=axes)
        if beta.requires_grad:
            beta.grad += g.sum(axis=axes)
        if x.requires_grad:
            gx = g * gamma.values
            if mode == "train":
                gx = inv * (gx - gx.mean(axis=axes) - xhat * (gx * xhat).mean(axis=axes))
            else:
                gx = gx * inv
            x.grad += gx

    return _result(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel centres, edge clamped."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(x: DiffTensor, out_h: int, out_w: int) -> DiffTensor:
    """Separable bilinear resize of an NHWC tensor."""
    _, h, w, _ = x.shape
    ah = bilinear_matrix(h, out_h)
    aw = bilinear_matrix(w, out_w)
    out = np.einsum("ih,nhwc,jw->nijc", ah, x.values, aw, optimize=True)

    def backward(g):
        x.grad += np.einsum("ih,nijc,jw->nhwc", ah, g, aw, optimize=True)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# losses and patch-selection plumbing
# ---------------------------------------------------------------------------


def cross_entropy(logits: DiffTensor, labels: np.ndarray, ignore: int = IGNORE,
                  per_sample: bool = False) -> DiffTensor:
    """Mean negative log-likelihood over non-ignored pixels.

    ``logits`` has classes on the last axis; ``labels`` matches the leading
    axes. With ``per_sample`` the first axis indexes samples: each sample's
    pixel mean is taken first, then the mean over samples (a sample with no
    valid pixel contributes 0). When every pixel is ignored the loss is 0
    with zero gradient and ``loss.meta["empty"]`` is set.
    """
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ContractError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != ignore
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise ContractError("label outside [0, K)")
    n_valid = int(valid.sum())
    if per_sample:
        counts = valid.reshape(valid.shape[0], -1).sum(axis=1)
        per = np.where(counts > 0, 1.0 / (np.maximum(counts, 1) * valid.shape[0]), 0.0)
        weight = valid * per.reshape((-1,) + (1,) * (valid.ndim - 1))
    else:
        weight = valid / n_valid if n_valid else np.zeros(valid.shape)
    z = logits.values - logits.values.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    safe = np.where(valid, labels, 0)[..., None]
    picked = np.take_along_axis(logp, safe, axis=-1)[..., 0]
    loss = -(picked * weight).sum() if n_valid else 0.0

    def backward(g):
        if not n_valid:
            return
        d = np.exp(logp)
        np.put_along_axis(d, safe, np.take_along_axis(d, safe, axis=-1) - 1.0, axis=-1)
        logits.grad += g * d * weight[..., None]

    out = _result(loss, (logits,), backward)
    out.meta["empty"] = n_valid == 0
    out.meta["n_valid"] = n_valid
    return out


def gather_locations(fmap: DiffTensor, image_idx, rows, cols) -> DiffTensor:
    """Pick rows of an (L, h, w, D) map at (image, row, col) triples -> (P, D)."""
    image_idx, rows, cols = (np.asarray(a, dtype=int) for a in (image_idx, rows, cols))
    out = fmap.values[image_idx, rows, cols]

    def backward(g):
        np.add.at(fmap.grad, (image_idx, rows, cols), g)

    return _result(out, (fmap,), backward)


def blend(weights: DiffTensor, patches: np.ndarray) -> DiffTensor:
    """Weighted sum over the patch axis: (P, D) x (P, D, S, S, C) -> (P, S, S, C).

    Accumulates in patch order starting from zero, so a one-hot weight
    vector reproduces the selected patch bitwise.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if weights.shape != patches.shape[:2]:
        raise ContractError(f"weights {weights.shape} do not match patches {patches.shape[:2]}")
    wv = weights.values
    out = np.zeros(patches.shape[:1] + patches.shape[2:])
    for d in range(patches.shape[1]):
        out = out + wv[:, d, None, None, None] * patches[:, d]

    def backward(g):
        weights.grad += np.einsum("pijc,pdijc->pd", g, patches)

    return _result(out, (weights,), backward)


def argmax_onehot(f: np.ndarray) -> np.ndarray:
    """One-hot of argmax over the last axis; ties go to the lowest index."""
    idx = np.argmax(f, axis=-1)
    return np.eye(f.shape[-1])[idx]


def straight_through_onehot(f: DiffTensor) -> DiffTensor:
    """Forward: hard one-hot of argmax. Backward: identity (gradient copied)."""

    def backward(g):
        f.grad += g

    return _result(argmax_onehot(f.values), (f,), backward)


def parameters_to_vector(params: Iterable[DiffTensor]) -> np.ndarray:
    return np.concatenate([p.values.ravel() for p in params])
