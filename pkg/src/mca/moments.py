"""Per-channel central-moment pooling with closed-form gradients.

Moments are computed two-pass (mean first, then centered powers) to avoid the
cancellation that raw power sums suffer from. Order 3 is the raw third central
moment, not standardized skewness, so constant channels stay well defined.
Also hosts the scalar moment-aggregate diagnostic and the order-decreasing
upper-bound checker for moments of bounded samples.
"""

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, ShapeError, _node, _acc

__all__ = [
    "MomentVector", "EmaConfig", "moment1", "moment_k", "aggregate",
    "ema_scalar", "prop1_bound", "check_bound", "moments_of",
]


@dataclass
class MomentVector:
    """Stack of selected per-channel moments, shape [N, K_m, C]."""
    values: Tensor
    selected: tuple

    @property
    def k_m(self):
        return len(self.selected)


@dataclass
class EmaConfig:
    """Max order K and per-order weights in (0,1) for the scalar aggregate."""
    K: int
    alphas: tuple = field(default=None)

    def __post_init__(self):
        if not 1 <= self.K <= 3:
            raise ValueError(f"moment order K must be in [1,3], got {self.K}")
        if self.alphas is None:
            self.alphas = tuple([0.5] * self.K)
        self.alphas = tuple(float(a) for a in self.alphas)
        if len(self.alphas) != self.K:
            raise ValueError(f"expected {self.K} weights, got {len(self.alphas)}")
        for a in self.alphas:
            if not 0.0 < a < 1.0:
                raise ValueError(f"moment weights must lie in (0,1), got {a}")


def _check_spatial(x):
    if x.ndim != 4:
        raise ShapeError(f"expected activation [N,C,H,W], got shape {x.shape}")
    if x.shape[2] * x.shape[3] < 1:
        raise ShapeError("empty spatial extent")


def moment1(x):
    """Per-channel spatial mean, [N,C,H,W] -> [N,C]."""
    _check_spatial(x)
    n_sp = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        _acc(x, np.broadcast_to(g[:, :, None, None] / n_sp, x.shape).astype(x.dtype))
    return _node(out, (x,), bwd)


def moment_k(x, k):
    """k-th central moment per channel (k in {2,3}), [N,C,H,W] -> [N,C].

    Gradients are closed-form:
      dM2/dx_i = (2/N)(x_i - mu)
      dM3/dx_i = (3/N)((x_i - mu)^2 - M2)
    """
    if k not in (2, 3):
        raise ValueError(f"central moment order must be 2 or 3, got {k}")
    _check_spatial(x)
    n_sp = x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    d = x.data - mu
    out = (d ** k).mean(axis=(2, 3))

    if k == 2:
        def bwd(g):
            _acc(x, g[:, :, None, None] * (2.0 / n_sp) * d)
    else:
        m2 = (d * d).mean(axis=(2, 3), keepdims=True)

        def bwd(g):
            _acc(x, g[:, :, None, None] * (3.0 / n_sp) * (d * d - m2))
    return _node(out, (x,), bwd)


def aggregate(x, selected):
    """Stack the requested moment orders into a MomentVector [N,K_m,C]."""
    selected = tuple(selected)
    if not selected:
        raise ValueError("moment selection must be nonempty")
    if list(selected) != sorted(set(selected)) or any(s not in (1, 2, 3) for s in selected):
        raise ValueError(f"moment selection must be an ascending subset of {{1,2,3}}, got {selected}")
    rows = [moment1(x) if s == 1 else moment_k(x, s) for s in selected]
    out = np.stack([r.data for r in rows], axis=1)

    def bwd(g):
        for i, r in enumerate(rows):
            _acc(r, np.ascontiguousarray(g[:, i, :]))
    return MomentVector(values=_node(out, tuple(rows), bwd), selected=selected)


# -- plain-array diagnostics (not on the training path) ----------------

def moments_of(samples, k):
    """Definitional k-th moment of raw samples along axis 0.

    k=1 is the mean; k>=2 are central moments. samples may be [N] or [N,D];
    returns a scalar or a length-D vector.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("empty sample set")
    if k == 1:
        return samples.mean(axis=0)
    mu = samples.mean(axis=0)
    return ((samples - mu) ** k).mean(axis=0)


def ema_scalar(samples, cfg):
    """Weighted sum of 2-norms of the marginal moment vectors up to order K."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("empty sample set")
    total = cfg.alphas[0] * np.linalg.norm(np.atleast_1d(moments_of(samples, 1)))
    for k in range(2, cfg.K + 1):
        total += cfg.alphas[k - 1] * np.linalg.norm(np.atleast_1d(moments_of(samples, k)))
    return float(total)


def prop1_bound(k, n_dims):
    """Upper bound sqrt(N)*((1/(k+1))*(k/(k+1))^k + 2^-(1+k)) on ||M_k||_2."""
    if k < 1:
        raise ValueError(f"moment order must be positive, got {k}")
    if n_dims < 1:
        raise ValueError(f"dimension count must be positive, got {n_dims}")
    return float(np.sqrt(n_dims) * ((1.0 / (k + 1)) * (k / (k + 1)) ** k + 2.0 ** (-(1 + k))))


def check_bound(samples, k, a=0.0, b=1.0):
    """Check ||M_k||_2 / (b-a)^k against the order-k upper bound.

    M_k here is the central moment of the bound statement, so k=1 is
    identically zero. Returns (holds, margin) with margin = bound - value.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("empty sample set")
    if b <= a:
        raise ValueError(f"invalid interval [{a}, {b}]")
    if samples.min() < a or samples.max() > b:
        raise ValueError(f"samples outside [{a}, {b}]")
    if k == 1:
        value = 0.0
    else:
        value = float(np.linalg.norm(np.atleast_1d(moments_of(samples, k)))) / (b - a) ** k
    n_dims = 1 if samples.ndim == 1 else samples.shape[1]
    bound = prop1_bound(k, n_dims)
    return bound >= value, bound - value
