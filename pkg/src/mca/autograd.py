"""Minimal dense-tensor reverse-mode autodiff.

Tensors wrap numpy arrays (rank 0..4, batch x channel x height x width for
activations). Each op records a backward closure on its output; ``backward()``
on a scalar replays them in reverse topological order. No in-place mutation of
tensors that participate in a graph.
"""

import numpy as np

__all__ = [
    "Tensor", "add", "sub", "mul", "div", "matmul", "relu", "sigmoid",
    "sqrt", "reshape", "mean", "sum_axes", "conv2d", "conv1d_channel",
    "reduce_spatial", "broadcast_mul", "linear", "softmax_cross_entropy",
    "channel_scale_shift", "batch_norm_train",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense real array with an optional gradient accumulator."""

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    # -- gradient plumbing ---------------------------------------------
    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Reverse-mode sweep from a scalar loss."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ------------------------------------------------
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
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.dtype)))

    def sum(self):
        return sum_axes(self, axes=None)

    def reshape(self, *shape):
        return reshape(self, shape)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _needs(xs):
    return any(x.requires_grad or x._backward_fn is not None for x in xs)


def _node(data, parents, backward_fn):
    if _needs(parents):
        return Tensor(data, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


def _acc(t, g):
    # leaves that never asked for gradients skip accumulation entirely
    if t.requires_grad or t._backward_fn is not None:
        t._accumulate(np.ascontiguousarray(g))


# -- elementwise -------------------------------------------------------

def add(x, y):
    def bwd(g):
        _acc(x, _unbroadcast(g, x.shape))
        _acc(y, _unbroadcast(g, y.shape))
    return _node(x.data + y.data, (x, y), bwd)


def sub(x, y):
    def bwd(g):
        _acc(x, _unbroadcast(g, x.shape))
        _acc(y, _unbroadcast(-g, y.shape))
    return _node(x.data - y.data, (x, y), bwd)


def mul(x, y):
    def bwd(g):
        _acc(x, _unbroadcast(g * y.data, x.shape))
        _acc(y, _unbroadcast(g * x.data, y.shape))
    return _node(x.data * y.data, (x, y), bwd)


def div(x, y):
    def bwd(g):
        _acc(x, _unbroadcast(g / y.data, x.shape))
        _acc(y, _unbroadcast(-g * x.data / (y.data * y.data), y.shape))
    return _node(x.data / y.data, (x, y), bwd)


def sqrt(x):
    out = np.sqrt(x.data)

    def bwd(g):
        _acc(x, g * (0.5 / out))
    return _node(out, (x,), bwd)


def relu(x):
    mask = x.data > 0

    def bwd(g):
        _acc(x, g * mask)
    return _node(x.data * mask, (x,), bwd)


def sigmoid(x):
    # split by sign for overflow safety
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def bwd(g):
        _acc(x, g * out * (1.0 - out))
    return _node(out, (x,), bwd)


# -- shape / reduction -------------------------------------------------

def reshape(x, shape):
    old = x.shape

    def bwd(g):
        _acc(x, g.reshape(old))
    return _node(x.data.reshape(shape), (x,), bwd)


def sum_axes(x, axes=None, keepdims=False):
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        gg = g
        if axes is not None and not keepdims:
            gg = np.expand_dims(gg, axes)
        _acc(x, np.broadcast_to(gg, x.shape).astype(x.dtype))
    return _node(out, (x,), bwd)


def mean(x, axes=None, keepdims=False):
    if axes is None:
        n = x.data.size
    else:
        ax = (axes,) if isinstance(axes, int) else axes
        n = int(np.prod([x.shape[a] for a in ax]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        gg = g
        if axes is not None and not keepdims:
            gg = np.expand_dims(gg, axes)
        _acc(x, np.broadcast_to(gg, x.shape).astype(x.dtype) / n)
    return _node(out, (x,), bwd)


def reduce_spatial(x, kind="mean"):
    """Per-channel spatial reduction [N,C,H,W] -> [N,C]."""
    if kind != "mean":
        raise ValueError(f"unsupported reduction kind: {kind!r}")
    if x.ndim != 4:
        raise ShapeError(f"reduce_spatial expects rank-4 input, got shape {x.shape}")
    if x.shape[2] * x.shape[3] < 1:
        raise ShapeError("reduce_spatial: empty spatial extent")
    return mean(x, axes=(2, 3))


# -- linear algebra ----------------------------------------------------

def matmul(x, y):
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {x.shape} @ {y.shape}")

    def bwd(g):
        _acc(x, g @ y.data.T)
        _acc(y, x.data.T @ g)
    return _node(x.data @ y.data, (x, y), bwd)


def linear(x, w, b=None):
    """x[N,F] @ w[F,O] + b[O]."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


# -- convolutions ------------------------------------------------------

def conv2d(x, w, stride=1, pad=0, b=None):
    """2-D cross-correlation: x[N,C_in,H,W] * w[C_out,C_in,kh,kw]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}")
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    # floor-division extents, matching mainstream conv semantics
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (wd + 2 * pad - kw) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(
            f"conv2d geometry invalid: input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, pad {pad}")

    if pad:
        xp = np.zeros((n, c_in, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + wd] = x.data
    else:
        xp = x.data
    # tap loop: one GEMM per kernel position over a strided view of the
    # padded input; faster than an im2col copy at these channel widths
    out = np.zeros((n, h_out, w_out, c_out), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            v = xp[:, :, i:i + h_out * stride:stride, j:j + w_out * stride:stride]
            out += np.tensordot(v, w.data[:, :, i, j], axes=([1], [1]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bwd(g):
        need_x = x.requires_grad or x._backward_fn is not None
        gw = np.zeros_like(w.data)
        gxp = np.zeros_like(xp) if need_x else None
        for i in range(kh):
            for j in range(kw):
                v = xp[:, :, i:i + h_out * stride:stride, j:j + w_out * stride:stride]
                gw[:, :, i, j] = np.tensordot(g, v, axes=([0, 2, 3], [0, 2, 3]))
                if need_x:
                    gxp[:, :, i:i + h_out * stride:stride,
                        j:j + w_out * stride:stride] += np.tensordot(
                            g, w.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        _acc(w, gw)
        if need_x:
            _acc(x, gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp)

    out_t = _node(out, (x, w), bwd)
    if b is not None:
        out_t = add(out_t, reshape(b, (1, c_out, 1, 1)))
    return out_t


def conv1d_channel(m, w, pad=None):
    """Cross-correlation along the channel axis, summed over moment rows.

    m: [N, K_m, C], w: [1, K_m, k] with k odd; zero padding keeps the output
    channel extent at C. Returns [N, 1, C].
    """
    if m.ndim != 3 or w.ndim != 3 or w.shape[0] != 1:
        raise ShapeError(f"conv1d_channel expects m[N,K,C] and w[1,K,k], got {m.shape}, {w.shape}")
    n, km, c = m.shape
    k = w.shape[2]
    if k % 2 == 0:
        raise ValueError(f"conv1d_channel kernel size must be odd, got {k}")
    if w.shape[1] != km:
        raise ShapeError(f"conv1d_channel moment-row mismatch: m has {km}, w expects {w.shape[1]}")
    if pad is None:
        pad = k // 2
    if pad != k // 2:
        raise ValueError(f"conv1d_channel requires pad == k//2 ({k // 2}), got {pad}")

    mp = np.zeros((n, km, c + 2 * pad), dtype=m.dtype)
    mp[:, :, pad:pad + c] = m.data
    out = np.zeros((n, 1, c), dtype=m.dtype)
    for j in range(k):
        out[:, 0, :] += np.tensordot(mp[:, :, j:j + c], w.data[0, :, j], axes=([1], [0]))

    def bwd(g):
        g2 = g[:, 0, :]
        gw = np.zeros_like(w.data)
        gmp = np.zeros_like(mp)
        for j in range(k):
            gw[0, :, j] = np.tensordot(g2, mp[:, :, j:j + c], axes=([0, 1], [0, 2]))
            gmp[:, :, j:j + c] += g2[:, None, :] * w.data[0, :, j][None, :, None]
        _acc(w, gw)
        _acc(m, np.ascontiguousarray(gmp[:, :, pad:pad + c]))

    return _node(out, (m, w), bwd)


# -- fused normalization ops -------------------------------------------

def channel_scale_shift(x, gamma, beta):
    """x[N,C,H,W] * gamma[C] + beta[C], fused."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"scale/shift shapes {gamma.shape}/{beta.shape} do not match C={c}")
    gr = gamma.data.reshape(1, c, 1, 1)
    out = x.data * gr + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        _acc(x, g * gr)
        if gamma.requires_grad or gamma._backward_fn is not None:
            _acc(gamma, (g * x.data).sum(axis=(0, 2, 3)))
        _acc(beta, g.sum(axis=(0, 2, 3)))
    return _node(out, (x, gamma, beta), bwd)


def batch_norm_train(x, gamma, beta, eps=1e-5):
    """Batch normalization over (N,H,W) per channel, training statistics.

    Returns (out, batch_mean[C], batch_var[C]); the statistics are plain
    arrays for running-average updates outside the graph.
    """
    c = x.shape[1]
    n_red = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    var = x.data.var(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gr = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gr + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        if gamma.requires_grad or gamma._backward_fn is not None:
            _acc(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _acc(beta, g.sum(axis=(0, 2, 3)))
        if not (x.requires_grad or x._backward_fn is not None):
            return
        gg = g * gr
        s1 = gg.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (gg * xhat).sum(axis=(0, 2, 3), keepdims=True)
        _acc(x, inv * (gg - (s1 + xhat * s2) / n_red))
    node = _node(out, (x, gamma, beta), bwd)
    return node, mu.reshape(-1).copy(), var.reshape(-1).copy()


# -- composite ---------------------------------------------------------

def broadcast_mul(x, gate):
    """Rescale x[N,C,H,W] by a per-channel gate [N,C] (or [N,C,1,1])."""
    if x.ndim != 4:
        raise ShapeError(f"broadcast_mul expects rank-4 activation, got {x.shape}")
    if gate.ndim == 2:
        gate = reshape(gate, (gate.shape[0], gate.shape[1], 1, 1))
    if gate.ndim != 4 or gate.shape[2:] != (1, 1) or gate.shape[:2] != x.shape[:2]:
        raise ShapeError(f"broadcast_mul gate shape {gate.shape} does not match activation {x.shape}")
    return mul(x, gate)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits[N,K]) against integer labels[N]."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects rank-2 logits, got {logits.shape}")
    labels = np.asarray(labels)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), labels] - np.log(ez.sum(axis=1)))
    loss = np.asarray(nll.mean(), dtype=logits.dtype)

    def bwd(g):
        gl = probs.copy()
        gl[np.arange(n), labels] -= 1.0
        _acc(logits, gl * (g / n))
    return _node(loss, (logits,), bwd)
