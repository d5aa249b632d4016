"""Small reverse-mode autodiff engine over numpy arrays.

Only the operations the phase-retrieval network needs are provided.  Every
shape rule is explicit: there is no broadcasting except a per-channel bias.
Convolutions are cross-correlations (no kernel flip) with zero padding.

Values are float32 by default.  Gradient checks switch to float64 with
:func:`precision`::

    with precision(np.float64):
        err = grad_check(build, params)
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import as_strided

_STATE = {"dtype": np.float32}


def default_dtype():
    return _STATE["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _STATE["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    old = _STATE["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _STATE["dtype"] = old


class Tensor:
    """An array node in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters (or inputs being
    optimized); their ``grad`` accumulates across :meth:`backward` calls until
    :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'!r}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that is not attached to a graph of parameters")
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")

        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological(root: Tensor) -> list:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- convolution machinery -------------------------------------------------


def _windows(xp, kh, kw, stride, dilation, ho, wo):
    """Strided view ``(n, c, kh, kw, ho, wo)`` of a padded input."""
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2 * dilation, s3 * dilation, s2 * stride, s3 * stride),
        writeable=False,
    )


def _scatter(cols, out_h, out_w, stride, dilation):
    """Adjoint of :func:`_windows`: sum ``(n, c, kh, kw, ho, wo)`` patches into an image."""
    n, c, kh, kw, ho, wo = cols.shape
    out = np.zeros((n, c, out_h, out_w), dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            out[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += cols[
                :, :, i, j
            ]
    return out


def _im2col(xp, kh, kw, stride, dilation, ho, wo):
    """``(n, c * kh * kw, ho * wo)`` patch matrix; a free reshape for 1x1 stride-1 kernels."""
    n, c = xp.shape[:2]
    if kh == kw == 1 and stride == 1:
        return xp.reshape(n, c, ho * wo)
    return _windows(xp, kh, kw, stride, dilation, ho, wo).reshape(n, c * kh * kw, ho * wo)


def _check_conv_args(x, w, b, stride, dilation, padding, in_axis):
    if x.ndim != 4:
        raise ValueError(f"input must be 4-D (n, c, h, w), got shape {x.shape}")
    if w.ndim != 4:
        raise ValueError(f"kernel must be 4-D, got shape {w.shape}")
    if x.shape[1] != w.shape[in_axis]:
        raise ValueError(
            f"channel mismatch: input {x.shape} has {x.shape[1]} channels, kernel {w.shape} expects {w.shape[in_axis]}"
        )
    out_ch = w.shape[1 - in_axis]
    if b is not None and b.shape != (out_ch,):
        raise ValueError(f"bias shape {b.shape} does not match {out_ch} output channels")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"need stride >= 1, dilation >= 1, padding >= 0; got {stride}, {dilation}, {padding}")


def conv2d(x, w, b=None, stride=1, dilation=1, padding=0) -> Tensor:
    """2-D cross-correlation. ``w`` is ``(out_channels, in_channels, kh, kw)``."""
    x, w = _as_tensor(x), _as_tensor(w)
    b = None if b is None else _as_tensor(b)
    _check_conv_args(x, w, b, stride, dilation, padding, in_axis=1)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {w.shape} with dilation {dilation} does not fit input {x.shape}")

    xp = x.data if padding == 0 else np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    wm = w.data.reshape(o, -1)
    out = np.matmul(wm, cols)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(n, o, ho, wo)

    def backward(g):
        gm = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.matmul(wm.T, gm).reshape(n, c, kh, kw, ho, wo)
            if kh == kw == 1 and stride == 1:
                dxp = dcols.reshape(n, c, ho, wo)
            else:
                dxp = _scatter(dcols, h + 2 * padding, wd + 2 * padding, stride, dilation)
            gx = dxp[:, :, padding : padding + h, padding : padding + wd]
        if w.requires_grad:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, _parents=parents, _backward=backward, op="conv2d")


def conv2d_transpose(x, w, b=None, stride=1, padding=0, output_padding=0, dilation=1) -> Tensor:
    """Fractionally strided convolution, the input-adjoint of :func:`conv2d`.

    ``w`` is ``(in_channels, out_channels, kh, kw)``, i.e. the kernel of the
    forward convolution this operator transposes.  Output extent is
    ``(h - 1) * stride - 2 * padding + dilation * (kh - 1) + 1 + output_padding``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    b = None if b is None else _as_tensor(b)
    _check_conv_args(x, w, b, stride, dilation, padding, in_axis=0)
    if not 0 <= output_padding < max(stride, dilation):
        raise ValueError(f"output_padding must be in [0, max(stride, dilation)), got {output_padding}")
    n, c, h, wd = x.shape
    _, o, kh, kw = w.shape
    full_h = (h - 1) * stride + dilation * (kh - 1) + 1
    full_w = (wd - 1) * stride + dilation * (kw - 1) + 1
    ho = full_h - 2 * padding + output_padding
    wo = full_w - 2 * padding + output_padding
    if ho < 1 or wo < 1:
        raise ValueError(f"padding {padding} leaves no output for input {x.shape} and kernel {w.shape}")
    buf_h = max(full_h, padding + ho)
    buf_w = max(full_w, padding + wo)

    xm = x.data.reshape(n, c, h * wd)
    wm = w.data.reshape(c, -1)
    cols = np.matmul(wm.T, xm).reshape(n, o, kh, kw, h, wd)
    full = _scatter(cols, buf_h, buf_w, stride, dilation)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        if padding == 0 and (buf_h, buf_w) == (ho, wo):
            gfull = g
        else:
            gfull = np.zeros((n, o, buf_h, buf_w), dtype=g.dtype)
            gfull[:, :, padding : padding + ho, padding : padding + wo] = g
        gcols = _im2col(gfull, kh, kw, stride, dilation, h, wd)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(wm, gcols).reshape(n, c, h, wd)
        if w.requires_grad:
            gw = np.matmul(xm, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(np.ascontiguousarray(out), _parents=parents, _backward=backward, op="conv2d_transpose")


# -- pointwise and structural ops -----------------------------------------


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return Tensor(
        np.maximum(x.data, 0),
        _parents=(x,),
        _backward=lambda g: (g * mask,),
        op="relu",
    )


def residual_add(a, b) -> Tensor:
    """Elementwise sum of a block's input and its learned correction.

    Shapes must match exactly; mismatched paths need an explicit shortcut
    convolution first.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(
            f"residual_add shapes {a.shape} and {b.shape} differ; project the shortcut with a convolution first"
        )
    return Tensor(a.data + b.data, _parents=(a, b), _backward=lambda g: (g, g), op="add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shapes {a.shape} and {b.shape} differ")
    return Tensor(a.data * b.data, _parents=(a, b), _backward=lambda g: (g * b.data, g * a.data), op="mul")


def scale(x, factor: float) -> Tensor:
    x = _as_tensor(x)
    return Tensor(x.data * factor, _parents=(x,), _backward=lambda g: (g * factor,), op="scale")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    return Tensor(s, _parents=(x,), _backward=lambda g: (g * s * (1 - s),), op="sigmoid")


def concat(tensors, axis=1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ValueError(f"concat along axis {axis}: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), _parents=tuple(tensors), _backward=backward, op="concat")


def select_channel(x, channel: int) -> Tensor:
    """``x[:, channel]`` keeping the channel axis."""
    x = _as_tensor(x)
    if x.ndim != 4 or not 0 <= channel < x.shape[1]:
        raise IndexError(f"channel {channel} out of range for shape {x.shape}")

    def backward(g):
        out = np.zeros_like(x.data)
        out[:, channel : channel + 1] = g
        return (out,)

    return Tensor(x.data[:, channel : channel + 1].copy(), _parents=(x,), _backward=backward, op="select")


def tsum(x) -> Tensor:
    x = _as_tensor(x)
    return Tensor(x.data.sum(), _parents=(x,), _backward=lambda g: (np.full_like(x.data, g),), op="sum")


def mean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    return Tensor(x.data.mean(), _parents=(x,), _backward=lambda g: (np.full_like(x.data, g / n),), op="mean")


def l1_loss(y, target) -> Tensor:
    """Mean absolute error normalized by the trailing image extents and the batch.

    ``sum |y - target| / (h * w)`` per sample, averaged over all leading axes.
    The target receives no gradient.
    """
    y = _as_tensor(y)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=y.data.dtype)
    if y.shape != t.shape:
        raise ValueError(f"l1_loss shapes differ: output {y.shape} vs target {t.shape}")
    if y.ndim < 2:
        raise ValueError(f"l1_loss needs at least 2-D (h, w) inputs, got shape {y.shape}")
    diff = y.data - t
    count = diff.size
    loss = np.abs(diff).sum() / count
    return Tensor(
        np.asarray(loss, dtype=y.data.dtype),
        _parents=(y,),
        _backward=lambda g: (np.sign(diff) * (g / count),),
        op="l1",
    )


# -- finite-difference check ------------------------------------------------


def grad_check(build, params, epsilon=1e-5, samples=6, seed=0, kink_tol=1e-3, max_retries=50) -> float:
    """Largest relative error between backprop and central differences.

    ``build()`` must rebuild a scalar loss from the current values of
    ``params``.  For each parameter ``samples`` random entries are perturbed
    by ``+-epsilon``.  Entries where the two one-sided slopes disagree by more
    than ``kink_tol`` straddle a ReLU/L1 kink and are redrawn; after
    ``max_retries`` redraws the check gives up.

    Returns ``max |analytic - numeric| / max(1, |analytic|)``.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    loss = build()
    loss.backward()
    f0 = float(loss.data)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    retries = 0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        taken = 0
        while taken < min(samples, flat.size):
            k = int(rng.integers(flat.size))
            orig = flat[k]
            flat[k] = orig + epsilon
            fp = float(build().data)
            flat[k] = orig - epsilon
            fm = float(build().data)
            flat[k] = orig
            fwd, bwd = (fp - f0) / epsilon, (f0 - fm) / epsilon
            if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd) + abs(bwd)):
                retries += 1
                if retries > max_retries:
                    raise RuntimeError(f"grad_check: more than {max_retries} sample points sit on kinks")
                continue
            numeric = (fp - fm) / (2 * epsilon)
            a = float(ga.reshape(-1)[k])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
            taken += 1
    for p in params:
        p.zero_grad()
    return worst
