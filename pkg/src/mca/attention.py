"""Channel attention blocks: moment attention plus SE / ECA / CFC baselines.

The moment block runs aggregate -> cross-moment fusion -> sigmoid gate ->
channel rescale. Fusion uses one channel-shared kernel over all moment rows,
followed by an optional per-channel affine, so the learnable count per block
is K_m*k + 2C + K_m with the affine on. The single-moment mean variant with
unit moment weights and no affine reduces exactly to the ECA block.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor, ShapeError
from .moments import MomentVector, aggregate

__all__ = [
    "AttentionConfig", "CmcParams", "SeParams", "GateOutput", "ParamCountReport",
    "cmc_forward", "cfc_forward", "mca_forward", "eca_forward", "se_forward",
    "count_params", "attention_param_count", "RESNET50_STAGES",
]

_VARIANTS = {
    "none": (),
    "mca-e": (1, 2),
    "mca-s": (1, 3),
    "mca-mono1": (1,),
    "mca-mono2": (2,),
    "mca-mono3": (3,),
    "mca-dual12": (1, 2),
    "mca-dual13": (1, 3),
    "mca-dual23": (2, 3),
    "mca-triple": (1, 2, 3),
}

_DEFAULT_KERNEL = {"mca-e": 11, "mca-s": 3}


@dataclass
class AttentionConfig:
    variant: str = "none"
    kernel_size: int = None
    reduction: int = 16          # SE only
    alpha_init: float = 0.0      # logit; sigmoid(0) = 0.5
    alpha_fixed: float = None    # bypass the learnable weights (e.g. 1.0)
    use_affine: bool = True
    standardize_moments: bool = False
    fusion: str = "cmc"          # "cmc" | "cfc"

    def __post_init__(self):
        if self.variant not in _VARIANTS and self.variant not in ("se", "eca"):
            raise ValueError(f"unknown attention variant: {self.variant!r}")
        if self.kernel_size is None:
            self.kernel_size = _DEFAULT_KERNEL.get(self.variant, 3)
        if self.variant not in ("none", "se"):
            if self.kernel_size % 2 == 0:
                raise ValueError(f"channel kernel size must be odd, got {self.kernel_size}")
            if not 1 <= self.kernel_size <= 11:
                raise ValueError(f"channel kernel size must be in [1,11], got {self.kernel_size}")
        if self.fusion not in ("cmc", "cfc"):
            raise ValueError(f"unknown fusion mode: {self.fusion!r}")

    @property
    def selected(self):
        return _VARIANTS.get(self.variant, ())


@dataclass
class CmcParams:
    """Learnables of one moment-attention block."""
    w: Tensor                    # [1, K_m, k] shared cross-moment kernel
    gamma: Tensor = None         # [C]
    beta: Tensor = None          # [C]
    a: Tensor = None             # [K_m] logits, alpha = sigmoid(a); None = alpha fixed 1
    cfc_w: Tensor = None         # [K_m, C] per-channel fusion weights (cfc mode)
    # running per-moment scales, plain arrays (standardize_moments mode)
    scales: np.ndarray = None

    def named(self, prefix=""):
        out = {}
        for name in ("w", "gamma", "beta", "a", "cfc_w"):
            t = getattr(self, name)
            if t is not None:
                out[prefix + name] = t
        return out

    @classmethod
    def create(cls, cfg, channels, dtype=np.float64):
        k_m = len(cfg.selected)
        if k_m == 0:
            raise ValueError(f"variant {cfg.variant!r} has no moment rows")
        k = cfg.kernel_size
        if channels < k:
            raise ShapeError(
                f"channel count {channels} smaller than channel kernel {k}; "
                "refusing to truncate the kernel")
        p = cls(w=Tensor(np.full((1, k_m, k), 1.0 / (k_m * k), dtype=dtype), requires_grad=True))
        if cfg.fusion == "cfc":
            p.cfc_w = Tensor(np.full((k_m, channels), 1.0 / k_m, dtype=dtype), requires_grad=True)
            p.w = None
        if cfg.use_affine:
            p.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
            p.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        if cfg.alpha_fixed is None:
            p.a = Tensor(np.full(k_m, cfg.alpha_init, dtype=dtype), requires_grad=True)
        elif cfg.alpha_fixed != 1.0:
            raise ValueError("fixed moment weights other than 1 are not supported")
        if cfg.standardize_moments:
            p.scales = np.ones(k_m, dtype=dtype)
        return p


@dataclass
class SeParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix=""):
        return {prefix + n: getattr(self, n) for n in ("w1", "b1", "w2", "b2")}

    @classmethod
    def create(cls, channels, reduction, dtype=np.float64, rng=None):
        if channels % reduction != 0:
            raise ShapeError(f"channel count {channels} not divisible by reduction {reduction}")
        hidden = channels // reduction
        rng = rng or np.random.default_rng(0)
        s1 = np.sqrt(2.0 / channels)
        s2 = np.sqrt(2.0 / hidden)
        return cls(
            w1=Tensor((rng.standard_normal((channels, hidden)) * s1).astype(dtype), requires_grad=True),
            b1=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
            w2=Tensor((rng.standard_normal((hidden, channels)) * s2).astype(dtype), requires_grad=True),
            b2=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        )


@dataclass
class GateOutput:
    pre: Tensor      # [N,C] fusion output before the sigmoid
    gate: Tensor     # [N,C], every element strictly in (0,1)
    y: Tensor        # [N,C,H,W] recalibrated activation


def _scale_rows(m, p):
    v = m.values
    if p.scales is not None:
        # running scale keeps rows of different orders comparable; updated
        # outside the graph so it does not participate in gradients
        batch_scale = np.abs(v.data).mean(axis=(0, 2)) + 1e-8
        p.scales = 0.9 * p.scales + 0.1 * batch_scale
        v = ag.mul(v, Tensor(np.asarray(1.0 / p.scales, dtype=v.dtype).reshape(1, -1, 1)))
    if p.a is not None:
        alphas = ag.sigmoid(p.a)
        v = ag.mul(v, ag.reshape(alphas, (1, m.k_m, 1)))
    return v


def cmc_forward(m, p, use_affine=True):
    """Cross-moment fusion: shared kernel over the channel axis, then affine."""
    if not isinstance(m, MomentVector):
        raise TypeError("cmc_forward expects a MomentVector")
    n, k_m, c = m.values.shape
    if p.w is None or p.w.shape[1] != k_m:
        raise ShapeError(f"fusion kernel does not match {k_m} moment rows")
    k = p.w.shape[2]
    if c < k:
        raise ShapeError(f"channel count {c} smaller than channel kernel {k}")
    v = _scale_rows(m, p)
    u = ag.reshape(ag.conv1d_channel(v, p.w, pad=k // 2), (n, c))
    if use_affine:
        if p.gamma is None or p.beta is None:
            raise ShapeError("affine stage requested but gamma/beta missing")
        u = ag.add(ag.mul(u, ag.reshape(p.gamma, (1, c))), ag.reshape(p.beta, (1, c)))
    return u


def cfc_forward(m, weights):
    """Per-channel fusion with no cross-channel interaction (baseline)."""
    values = m.values if isinstance(m, MomentVector) else m
    n, k_m, c = values.shape
    if weights.shape != (k_m, c):
        raise ShapeError(f"fusion weights {weights.shape} do not match rows ({k_m},{c})")
    return ag.sum_axes(ag.mul(values, ag.reshape(weights, (1, k_m, c))), axes=(1,))


def mca_forward(x, cfg, p):
    """Full moment-attention block: aggregate, fuse, gate, rescale."""
    m = aggregate(x, cfg.selected)
    if cfg.fusion == "cfc":
        v = _scale_rows(m, p)
        pre = cfc_forward(v, p.cfc_w)
        if cfg.use_affine:
            c = x.shape[1]
            pre = ag.add(ag.mul(pre, ag.reshape(p.gamma, (1, c))), ag.reshape(p.beta, (1, c)))
    else:
        pre = cmc_forward(m, p, use_affine=cfg.use_affine)
    gate = ag.sigmoid(pre)
    return GateOutput(pre=pre, gate=gate, y=ag.broadcast_mul(x, gate))


def eca_forward(x, w):
    """ECA baseline: spatial mean, channel conv with kernel w[1,1,k], gate."""
    if w.ndim != 3 or w.shape[:2] != (1, 1):
        raise ShapeError(f"eca kernel must have shape [1,1,k], got {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ValueError(f"eca kernel size must be odd, got {k}")
    n, c = x.shape[0], x.shape[1]
    pooled = ag.reshape(ag.reduce_spatial(x, "mean"), (n, 1, c))
    pre = ag.reshape(ag.conv1d_channel(pooled, w, pad=k // 2), (n, c))
    gate = ag.sigmoid(pre)
    return GateOutput(pre=pre, gate=gate, y=ag.broadcast_mul(x, gate))


def se_forward(x, p):
    """SE baseline: spatial mean, bottleneck MLP, gate."""
    pooled = ag.reduce_spatial(x, "mean")
    h = ag.relu(ag.linear(pooled, p.w1, p.b1))
    pre = ag.linear(h, p.w2, p.b2)
    gate = ag.sigmoid(pre)
    return GateOutput(pre=pre, gate=gate, y=ag.broadcast_mul(x, gate))


# -- parameter accounting ----------------------------------------------

RESNET50_STAGES = ((3, 256), (4, 512), (6, 1024), (3, 2048))


@dataclass
class ParamCountReport:
    variant: str
    counted: int                     # instantiated learnables, summed over blocks
    formula_affine: int              # sum over stages of N_s * C_s * 2
    formula_total: int               # affine + kernel + per-moment weights
    formula_se: int                  # (2/r) * sum N_s * C_s^2 (bias-free form)
    formula_eca: int                 # sum N_s * k
    per_stage: tuple = field(default=())


def attention_param_count(cfg, channels):
    """Learnable count of a single attention block at a given width."""
    if cfg.variant == "none":
        return 0
    if cfg.variant == "se":
        hidden = channels // cfg.reduction
        return 2 * channels * hidden + hidden + channels
    if cfg.variant == "eca":
        return cfg.kernel_size
    k_m = len(cfg.selected)
    if cfg.fusion == "cfc":
        n = k_m * channels
    else:
        n = k_m * cfg.kernel_size
    if cfg.use_affine:
        n += 2 * channels
    if cfg.alpha_fixed is None:
        n += k_m
    return n


def count_params(stages, cfg):
    """Stage-wise attention parameter accounting against the closed forms."""
    counted = 0
    per_stage = []
    for n_s, c_s in stages:
        block = attention_param_count(cfg, c_s)
        counted += n_s * block
        per_stage.append((n_s, c_s, n_s * block))
    affine = sum(n_s * c_s * 2 for n_s, c_s in stages)
    k_m = max(len(cfg.selected), 1)
    total = affine + sum(n_s * (k_m * cfg.kernel_size + k_m) for n_s, _ in stages)
    se = int(round((2.0 / cfg.reduction) * sum(n_s * c_s ** 2 for n_s, c_s in stages)))
    eca = sum(n_s * cfg.kernel_size for n_s, _ in stages)
    return ParamCountReport(
        variant=cfg.variant, counted=counted, formula_affine=affine,
        formula_total=total, formula_se=se, formula_eca=eca,
        per_stage=tuple(per_stage))
