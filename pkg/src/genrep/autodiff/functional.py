"""Differentiable operators on :class:`Tensor`.

Image tensors are NCHW.  Every operator computes its forward value with
NumPy and, when a tape is active and some input requires a gradient,
records a vector-Jacobian product closure on that tape.
"""

from functools import lru_cache

import numpy as np

from .tensor import NonFiniteError, Tensor, current_tape


def _const(x):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _needs(t):
    return isinstance(t, Tensor) and t.requires_grad


def _make(out, inputs, vjp, op):
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    requires = any(_needs(t) for t in inputs)
    res = Tensor._wrap(out, requires)
    if requires:
        tape = current_tape()
        if tape is not None:
            tape.record(res, inputs, vjp)
    return res


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check(cond, msg):
    if not cond:
        raise ValueError(msg)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _const(a), _const(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}") from exc
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = _const(a), _const(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}") from exc
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = _const(a), _const(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}") from exc

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if _needs(a) else None
        gb = _unbroadcast(g * a.data, b.shape) if _needs(b) else None
        return ga, gb

    return _make(out, (a, b), vjp, "mul")


def relu(x):
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope=0.2):
    scale = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x):
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x):
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def softplus(x, beta=1.0):
    d = beta * x.data
    out = (np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))) / beta
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * s,), "softplus")


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims=False):
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis, keepdims), 1.0 / float(n))


def squared_l2(x):
    """Sum of squared entries."""
    d = x.data
    return _make(np.asarray(np.sum(d * d)), (x,), lambda g: (2.0 * g * d,), "squared_l2")


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis=1):
    tensors = [_const(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        grads = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                grads.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return grads

    return _make(out, tuple(tensors), vjp, "concat")


def slice_channels(x, start, stop):
    out = x.data[:, start:stop]
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(np.ascontiguousarray(out), (x,), vjp, "slice_channels")


# ---------------------------------------------------------------- layers

def linear(x, weight, bias=None):
    """Affine map ``x @ W.T + b`` for x of shape (N, in)."""
    _check(x.ndim == 2 and weight.ndim == 2 and x.shape[1] == weight.shape[1],
           f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        _check(bias.shape == (weight.shape[0],), "linear: bias shape mismatch")
        out = out + bias.data

    def vjp(g):
        gx = g @ weight.data if _needs(x) else None
        gw = g.T @ x.data if _needs(weight) else None
        gb = g.sum(axis=0) if _needs(bias) else None
        return gx, gw, gb

    return _make(out, (x, weight, bias), vjp, "linear")


def conv2d(x, weight, bias=None):
    """Stride-1 convolution with zero padding that preserves H and W.

    ``weight`` is (C_out, C_in, k, k) with odd k (1 or 3 in practice).
    """
    _check(x.ndim == 4, f"conv2d: expected NCHW input, got {x.shape}")
    _check(weight.ndim == 4 and weight.shape[2] == weight.shape[3] and weight.shape[2] % 2 == 1,
           f"conv2d: bad kernel shape {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, k, _ = weight.shape
    _check(c == c_in, f"conv2d: input has {c} channels, kernel expects {c_in}")
    if bias is not None:
        _check(bias.shape == (c_out,), "conv2d: bias shape mismatch")
    p = k // 2
    kk = k * k
    # im2col: rows are output pixels (NHW), columns are (tap, channel); one matmul
    wk = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0)).reshape(kk * c, c_out)
    xh = x.data.transpose(0, 2, 3, 1)
    if k == 1:
        cols = np.ascontiguousarray(xh).reshape(n * h * w, c)
    else:
        xp = np.pad(xh, ((0, 0), (p, p), (p, p), (0, 0)))
        cols = np.empty((n, h, w, kk, c))
        for idx in range(kk):
            i, j = divmod(idx, k)
            cols[:, :, :, idx, :] = xp[:, i:i + h, j:j + w, :]
        cols = cols.reshape(n * h * w, kk * c)
    out2d = cols @ wk
    if bias is not None:
        out2d += bias.data
    out = np.ascontiguousarray(out2d.reshape(n, h, w, c_out).transpose(0, 3, 1, 2))

    def vjp(g):
        g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, c_out)
        gw = None
        if _needs(weight):
            gw = (cols.T @ g2d).reshape(k, k, c, c_out).transpose(3, 2, 0, 1)
        gb = g2d.sum(axis=0) if _needs(bias) else None
        gx = None
        if _needs(x):
            gcols = (g2d @ wk.T).reshape(n, h, w, kk, c)
            if k == 1:
                gxh = gcols[:, :, :, 0, :]
            else:
                gxp = np.zeros((n, h + 2 * p, w + 2 * p, c))
                for idx in range(kk):
                    i, j = divmod(idx, k)
                    gxp[:, i:i + h, j:j + w, :] += gcols[:, :, :, idx, :]
                gxh = gxp[:, p:p + h, p:p + w, :]
            gx = np.ascontiguousarray(gxh.transpose(0, 3, 1, 2))
        return gx, gw, gb

    return _make(out, (x, weight, bias), vjp, "conv2d")


@lru_cache(maxsize=None)
def _bilinear_matrix(size, factor):
    # half-pixel centres, edge-clamped (align_corners=False convention)
    out = size * factor
    m = np.zeros((out, size))
    for o in range(out):
        src = (o + 0.5) / factor - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        m[o, min(max(lo, 0), size - 1)] += 1.0 - frac
        m[o, min(max(lo + 1, 0), size - 1)] += frac
    m.setflags(write=False)
    return m


def upsample(x, factor=2, mode="nearest"):
    """Integer-factor spatial upsampling, ``nearest`` or ``bilinear``."""
    _check(x.ndim == 4, f"upsample: expected NCHW input, got {x.shape}")
    f = int(factor)
    if mode == "nearest":
        out = x.data.repeat(f, axis=2).repeat(f, axis=3)
        n, c, h, w = x.shape
        return _make(out, (x,),
                     lambda g: (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),), "upsample")
    if mode == "bilinear":
        mh = _bilinear_matrix(x.shape[2], f)
        mw = _bilinear_matrix(x.shape[3], f)
        out = np.einsum("ih,nchw,jw->ncij", mh, x.data, mw, optimize=True)
        return _make(out, (x,),
                     lambda g: (np.einsum("ih,ncij,jw->nchw", mh, g, mw, optimize=True),),
                     "upsample")
    raise ValueError(f"unknown upsample mode {mode!r}")


def avg_pool2x(x):
    _check(x.ndim == 4 and x.shape[2] % 2 == 0 and x.shape[3] % 2 == 0,
           f"avg_pool2x: needs even spatial extents, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return _make(out, (x,),
                 lambda g: (0.25 * g.repeat(2, axis=2).repeat(2, axis=3),), "avg_pool2x")


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.9, eps=1e-5):
    """Per-channel normalisation over (N, H, W).

    In training mode the batch statistics are used and the running buffers
    (plain arrays) are updated in place as ``r = momentum*r + (1-momentum)*batch``.
    """
    _check(x.ndim == 4 and gamma.shape == (x.shape[1],), "batch_norm: shape mismatch")
    shp = (1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = x.data.size // x.shape[1]
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
        m = None
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shp)) * inv.reshape(shp)
    out = gamma.data.reshape(shp) * xhat + beta.data.reshape(shp)

    def vjp(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if _needs(gamma) else None
        gb = g.sum(axis=(0, 2, 3)) if _needs(beta) else None
        gx = None
        if _needs(x):
            gxhat = g * gamma.data.reshape(shp)
            if training:
                gx = (inv.reshape(shp) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=(0, 2, 3)).reshape(shp)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(shp))
            else:
                gx = gxhat * inv.reshape(shp)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), vjp, "batch_norm")


def dropout(x, p, training, rng):
    """Inverted dropout: scale kept units by 1/(1-p) in training, identity otherwise."""
    if not training or p == 0.0:
        return x
    _check(0.0 <= p < 1.0, "dropout: p must be in [0, 1)")
    mask = (rng.uniform(x.shape) >= p) / (1.0 - p)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def softmax(x, axis=1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), vjp, "softmax")


def log_softmax_np(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits, targets, ignore_index=-1):
    """Mean negative log-likelihood over pixels whose target != ignore_index.

    ``logits`` is (N, C, H, W) (or (N, C)); ``targets`` holds integer class
    indices with the logits' shape minus the channel axis.
    """
    t = np.asarray(targets)
    _check(logits.ndim >= 2 and t.shape == logits.shape[:1] + logits.shape[2:],
           f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    c = logits.shape[1]
    valid = t != ignore_index
    if np.any(t[valid] < 0) or np.any(t[valid] >= c):
        raise ValueError(f"cross_entropy: target class outside [0, {c})")
    count = int(valid.sum())
    safe = np.where(valid, t, 0).astype(np.int64)
    logp = log_softmax_np(logits.data)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / max(count, 1)

    def vjp(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe[:, None],
                          np.take_along_axis(p, safe[:, None], axis=1) - 1.0, axis=1)
        return (g * p * np.expand_dims(valid, 1) / max(count, 1),)

    return _make(np.asarray(loss), (logits,), vjp, "cross_entropy")
