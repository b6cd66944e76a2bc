"""Dense 3-D convolution kernels with hand-written backward passes and a
small reverse-mode tape.

Arrays are batched grids of shape ``(N, C, D, H, W)``.  A single grid of
shape ``(C, D, H, W)`` is accepted by the functional kernels and treated as
a batch of one.
"""

from __future__ import annotations

import numpy as np


def _batched(x):
    x = np.asarray(x)
    if x.ndim == 4:
        return x[None], True
    if x.ndim != 5:
        raise ValueError(f"expected a 4-D or 5-D grid, got shape {x.shape}")
    return x, False


def _out_size(n, k, stride):
    pad = k // 2
    return (n + 2 * pad - k) // stride + 1


def _im2col(x, k, stride):
    """Columns of shape (Cin * k^3, N * Do * Ho * Wo) for a zero-padded
    cross-correlation; row order is (cin, a, b, c)."""
    n, c, d, h, wd = x.shape
    out = tuple(_out_size(m, k, stride) for m in (d, h, wd))
    if k == 1:
        xs = x[:, :, ::stride, ::stride, ::stride]
        return np.ascontiguousarray(xs.transpose(1, 0, 2, 3, 4)).reshape(c, -1), out
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))).transpose(1, 0, 2, 3, 4)
    do, ho, wo = out
    cols = np.empty((c, k, k, k, n, do, ho, wo), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            for cc in range(k):
                cols[:, a, b, cc] = xp[:, :,
                                       a:a + stride * do:stride,
                                       b:b + stride * ho:stride,
                                       cc:cc + stride * wo:stride]
    return cols.reshape(c * k ** 3, -1), out


def _col2im(cols, in_shape, k, stride):
    """Adjoint of :func:`_im2col`."""
    n, c, d, h, wd = in_shape
    out = tuple(_out_size(m, k, stride) for m in (d, h, wd))
    do, ho, wo = out
    if k == 1:
        dx = np.zeros((c, n, d, h, wd), dtype=cols.dtype)
        dx[:, :, ::stride, ::stride, ::stride] = cols.reshape(c, n, do, ho, wo)
        return dx.transpose(1, 0, 2, 3, 4)
    p = k // 2
    cols = cols.reshape(c, k, k, k, n, do, ho, wo)
    xp = np.zeros((c, n, d + 2 * p, h + 2 * p, wd + 2 * p), dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            for cc in range(k):
                xp[:, :,
                   a:a + stride * do:stride,
                   b:b + stride * ho:stride,
                   cc:cc + stride * wo:stride] += cols[:, a, b, cc]
    return xp[:, :, p:p + d, p:p + h, p:p + wd].transpose(1, 0, 2, 3, 4)


def _to_rows(y):
    """(N, C, D, H, W) -> (C, N*D*H*W)"""
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3, 4)).reshape(y.shape[1], -1)


def _from_rows(rows, n, out):
    return rows.reshape(rows.shape[0], n, *out).transpose(1, 0, 2, 3, 4)


def _check_weights(x, w):
    if w.ndim != 5 or w.shape[2] != w.shape[3] or w.shape[3] != w.shape[4]:
        raise ValueError(f"weights must be (Cout, Cin, k, k, k), got {w.shape}")
    if w.shape[2] not in (1, 3):
        raise ValueError(f"kernel size must be 1 or 3, got {w.shape[2]}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, weights expect {w.shape[1]}")


def _conv_forward(x, w, b, stride):
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    cols, out = _im2col(x, w.shape[2], stride)
    rows = w.reshape(w.shape[0], -1) @ cols
    if b is not None:
        rows += b.reshape(-1, 1)
    return np.ascontiguousarray(_from_rows(rows, x.shape[0], out)), cols


def _conv_backward(dy, cols, in_shape, w, stride):
    dy2 = _to_rows(dy)
    w2 = w.reshape(w.shape[0], -1)
    dw = (dy2 @ cols.T).reshape(w.shape)
    dx = _col2im(w2.T @ dy2, in_shape, w.shape[2], stride)
    return np.ascontiguousarray(dx), dw, dy2.sum(axis=1)


def conv3d(x, w, b=None, stride=1):
    """Cross-correlation with ``k // 2`` zero padding.

    Output spatial size is ``ceil(n / stride)``.
    """
    x, squeeze = _batched(x)
    _check_weights(x, w)
    y, _ = _conv_forward(x, w, b, stride)
    return y[0] if squeeze else y


def conv3d_backward(dy, x, w, stride=1):
    """Gradients of :func:`conv3d` for upstream ``dy``.

    Returns ``(dx, dw, db)``.
    """
    x, squeeze = _batched(x)
    dy, _ = _batched(dy)
    _check_weights(x, w)
    expect = (x.shape[0], w.shape[0], *(_out_size(n, w.shape[2], stride) for n in x.shape[2:]))
    if dy.shape != expect:
        raise ValueError(f"upstream shape {dy.shape} does not match forward output {expect}")
    cols, _ = _im2col(x, w.shape[2], stride)
    dx, dw, db = _conv_backward(dy, cols, x.shape, w, stride)
    return (dx[0] if squeeze else dx), dw, db


def _deconv_shapes(x, w, stride, out_size):
    if w.ndim != 5 or w.shape[2:] != (3, 3, 3):
        raise ValueError(f"deconv weights must be (Cin, Cout, 3, 3, 3), got {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"input has {x.shape[1]} channels, weights expect {w.shape[0]}")
    if out_size is None:
        out_size = tuple(stride * n for n in x.shape[2:])
    elif np.isscalar(out_size):
        out_size = (int(out_size),) * 3
    for n_in, n_out in zip(x.shape[2:], out_size):
        if _out_size(n_out, 3, stride) != n_in:
            raise ValueError(f"output size {out_size} incompatible with input {x.shape[2:]}")
    return (x.shape[0], w.shape[1], *out_size)


def deconv3d(x, w, b=None, stride=2, out_size=None):
    """Transposed convolution, the adjoint of :func:`conv3d` with kernel 3.

    ``w`` has shape ``(Cin, Cout, 3, 3, 3)``: the deconv input plays the role
    of the forward convolution's output.  Output size defaults to
    ``stride * n`` per axis.
    """
    x, squeeze = _batched(x)
    out_shape = _deconv_shapes(x, w, stride, out_size)
    w2 = w.reshape(w.shape[0], -1)
    y = _col2im(w2.T @ _to_rows(x), out_shape, 3, stride)
    if b is not None:
        y = y + b.reshape(1, -1, 1, 1, 1)
    y = np.ascontiguousarray(y)
    return y[0] if squeeze else y


def deconv3d_backward(dy, x, w, stride=2):
    """Returns ``(dx, dw, db)`` for :func:`deconv3d`."""
    x, squeeze = _batched(x)
    dy, _ = _batched(dy)
    cols, out = _im2col(dy, 3, stride)
    if tuple(out) != x.shape[2:]:
        raise ValueError(f"upstream shape {dy.shape} does not match input {x.shape}")
    w2 = w.reshape(w.shape[0], -1)
    x2 = _to_rows(x)
    dx = np.ascontiguousarray(_from_rows(w2 @ cols, x.shape[0], out))
    dw = (x2 @ cols.T).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3, 4))
    return (dx[0] if squeeze else dx), dw, db


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return dy * (x > 0)


def sigmoid(x):
    """Logistic function, kept strictly inside (0, 1).

    Inputs are clamped to +-36 (64-bit) or +-16 (32-bit), the largest
    magnitudes whose sigmoid still rounds below 1.
    """
    dt = np.result_type(np.asarray(x), np.float32)
    lim = 16.0 if dt == np.float32 else 36.0
    x = np.clip(np.asarray(x, dtype=dt), -lim, lim)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(dy, x):
    s = sigmoid(x)
    return dy * s * (1 - s)


class AdamState:
    """First/second moment buffers keyed like the parameter dict."""

    def __init__(self, params):
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update with bias correction."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# --------------------------------------------------------------------------
# reverse-mode tape


class Var:
    __slots__ = ("value", "grad", "_parents", "_backward", "name")

    def __init__(self, value, parents=(), backward=None, name=None):
        self.value = value
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name})"


class Tape:
    """Records operations in execution order; ``backward`` walks them in
    reverse, which is a valid topological order for a tape.

    With ``record=False`` the ops only compute values.
    """

    def __init__(self, params, record=True):
        self.params = params
        self.record = record
        self.nodes = []
        self.leaves = {}

    def param(self, name):
        if name in self.leaves:
            return self.leaves[name]
        v = Var(self.params[name], name=name)
        self.leaves[name] = v
        return v

    def constant(self, value):
        return Var(np.asarray(value))

    def op(self, value, parents, backward):
        v = Var(value, parents, backward)
        if self.record:
            self.nodes.append(v)
        return v

    def backward(self, out, seed=None):
        if seed is None:
            if out.value.size != 1:
                raise ValueError("seed gradient required for non-scalar output")
            seed = np.ones_like(out.value)
        out.grad = seed
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            contribs = node._backward(node.grad)
            for parent, g in zip(node._parents, contribs):
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        return {name: (v.grad if v.grad is not None else np.zeros_like(v.value))
                for name, v in self.leaves.items()}

    # -- layers ------------------------------------------------------------

    def conv(self, x, prefix, stride=1):
        w = self.param(prefix + ".w")
        b = self.param(prefix + ".b")
        if x.value.shape[1] != w.value.shape[1]:
            raise ValueError(f"{prefix}: input has {x.value.shape[1]} channels, "
                             f"weights expect {w.value.shape[1]}")
        y, cols = _conv_forward(x.value, w.value, b.value, stride)
        in_shape, wv = x.value.shape, w.value

        def back(g):
            return _conv_backward(g, cols, in_shape, wv, stride)

        return self.op(y, (x, w, b), back)

    def deconv(self, x, prefix, stride=2, out_size=None):
        w = self.param(prefix + ".w")
        b = self.param(prefix + ".b")
        y = deconv3d(x.value, w.value, b.value, stride, out_size)
        xv, wv = x.value, w.value

        def back(g):
            return deconv3d_backward(g, xv, wv, stride)

        return self.op(y, (x, w, b), back)

    def relu(self, x):
        xv = x.value
        return self.op(relu(xv), (x,), lambda g: (relu_backward(g, xv),))

    def sigmoid(self, x):
        xv = x.value
        return self.op(sigmoid(xv), (x,), lambda g: (sigmoid_backward(g, xv),))

    def add(self, a, b):
        return self.op(a.value + b.value, (a, b), lambda g: (g, g))

    def concat(self, a, b):
        ca = a.value.shape[1]
        return self.op(np.concatenate([a.value, b.value], axis=1), (a, b),
                       lambda g: (g[:, :ca], g[:, ca:]))

    def split(self, x, at):
        """Split along channels; returns two Vars."""
        xv = x.value
        first = self.op(xv[:, :at], (x,), lambda g: (_embed(g, xv.shape, slice(None, at)),))
        second = self.op(xv[:, at:], (x,), lambda g: (_embed(g, xv.shape, slice(at, None)),))
        return first, second

    def clamped_exp(self, x, lo, hi):
        """exp(clip(x, lo, hi)); zero gradient where the clamp is active."""
        xv = x.value
        out = np.exp(np.clip(xv, lo, hi))
        inside = (xv >= lo) & (xv <= hi)
        return self.op(out, (x,), lambda g: (g * out * inside,))

    def add_noise(self, x, noise):
        return self.op(x.value + noise, (x,), lambda g: (g,))

    def scale(self, x, c):
        return self.op(x.value * c, (x,), lambda g: (g * c,))

    def sum(self, *xs):
        total = sum(float(np.sum(x.value)) for x in xs)
        return self.op(np.asarray(total), xs,
                       lambda g: tuple(np.full_like(x.value, g) for x in xs))


def _embed(g, shape, sl):
    out = np.zeros(shape, dtype=g.dtype)
    out[:, sl] = g
    return out
