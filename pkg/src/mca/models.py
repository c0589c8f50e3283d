"""Desk-scale CNN backbones with a pluggable channel-attention slot.

Two architectures: a plain mini-CNN and a 3-stage residual network with basic
blocks. Normalization is a learnable per-channel affine by default so that
per-sample finite differences stay meaningful; a batch-norm mode exists for
training runs. Parameter init is He fan-in for convolutions, seeded, and the
backbone draws are independent of the attention variant so models built from
the same seed share their non-attention weights.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor, ShapeError
from .attention import (
    AttentionConfig, CmcParams, SeParams, attention_param_count,
    eca_forward, mca_forward, se_forward,
)

__all__ = [
    "ModelSpec", "Model", "Checkpoint", "build", "mini_resnet_spec",
    "mini_cnn_spec", "save", "load", "restore", "load_model",
    "CheckpointError", "CheckpointFormatError", "CheckpointTruncatedError",
    "CheckpointVersionError", "MAGIC", "VERSION",
]

MAGIC = b"MCAW"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint I/O failures."""


class CheckpointFormatError(CheckpointError):
    """Wrong magic bytes or malformed structure."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the declared payload."""


class CheckpointVersionError(CheckpointError):
    """Unknown format version."""


@dataclass
class ModelSpec:
    stages: tuple                      # ((blocks, channels, stride), ...)
    stem_channels: int = 16
    stem_stride: int = 1
    in_channels: int = 3
    classes: int = 10
    arch: str = "resnet"               # "resnet" | "plain"
    norm: str = "affine"               # "affine" | "batchnorm"
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    stem_attention: bool = False       # extra attention slot after the stem

    def __post_init__(self):
        if self.arch not in ("resnet", "plain"):
            raise ValueError(f"unknown architecture: {self.arch!r}")
        if self.norm not in ("affine", "batchnorm"):
            raise ValueError(f"unknown normalization mode: {self.norm!r}")
        prev = 0
        for n_b, c, s in self.stages:
            if n_b < 1 or c < 1 or s < 1:
                raise ValueError(f"invalid stage spec {(n_b, c, s)}")
            if c < prev:
                raise ValueError("stage channel counts must be non-decreasing")
            prev = c


def mini_resnet_spec(attention=None, channels=(16, 32, 64), blocks=(1, 1, 1),
                     norm="affine", stem_stride=2, classes=10, stem_attention=False):
    stages = tuple((b, c, 1 if i == 0 else 2) for i, (b, c) in enumerate(zip(blocks, channels)))
    return ModelSpec(stages=stages, stem_channels=channels[0], stem_stride=stem_stride,
                     classes=classes, arch="resnet", norm=norm,
                     attention=attention or AttentionConfig(),
                     stem_attention=stem_attention)


def mini_cnn_spec(attention=None, channels=(16, 32), classes=10, norm="affine"):
    stages = tuple((1, c, 1 if i == 0 else 2) for i, c in enumerate(channels))
    return ModelSpec(stages=stages, stem_channels=channels[0], classes=classes,
                     arch="plain", norm=norm, attention=attention or AttentionConfig())


def _he_conv(rng, c_out, c_in, kh, kw, dtype):
    std = np.sqrt(2.0 / (c_in * kh * kw))
    return Tensor((rng.standard_normal((c_out, c_in, kh, kw)) * std).astype(dtype),
                  requires_grad=True)


class _Norm:
    """Per-channel affine, optionally with batch statistics (batch-norm mode)."""

    def __init__(self, channels, mode, dtype):
        self.mode = mode
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        if mode == "batchnorm":
            self.running_mean = np.zeros(channels, dtype=dtype)
            self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = 0.1
        self.eps = 1e-5

    def __call__(self, x, train):
        c = x.shape[1]
        if self.mode == "affine":
            return ag.channel_scale_shift(x, self.gamma, self.beta)
        if train:
            out, mu, var = ag.batch_norm_train(x, self.gamma, self.beta, eps=self.eps)
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mu).astype(x.dtype)
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * var).astype(x.dtype)
            return out
        norm = (x.data - self.running_mean.reshape(1, c, 1, 1)) / np.sqrt(
            self.running_var.reshape(1, c, 1, 1) + self.eps)
        return ag.channel_scale_shift(Tensor(norm), self.gamma, self.beta)

    def named(self, prefix):
        out = {prefix + "gamma": self.gamma, prefix + "beta": self.beta}
        return out

    def state(self, prefix):
        if self.mode == "batchnorm":
            return {prefix + "running_mean": self.running_mean,
                    prefix + "running_var": self.running_var}
        return {}


class _Attention:
    """One attention slot instance bound to a channel width."""

    def __init__(self, cfg, channels, dtype, rng):
        self.cfg = cfg
        self.channels = channels
        self.params = None
        if cfg.variant == "none":
            return
        if cfg.variant == "se":
            self.params = SeParams.create(channels, cfg.reduction, dtype=dtype, rng=rng)
        elif cfg.variant == "eca":
            self.params = Tensor(
                np.full((1, 1, cfg.kernel_size), 1.0 / cfg.kernel_size, dtype=dtype),
                requires_grad=True)
        else:
            self.params = CmcParams.create(cfg, channels, dtype=dtype)

    def __call__(self, x):
        if self.cfg.variant == "none":
            return x
        if self.cfg.variant == "se":
            return se_forward(x, self.params).y
        if self.cfg.variant == "eca":
            return eca_forward(x, self.params).y
        return mca_forward(x, self.cfg, self.params).y

    def named(self, prefix):
        if self.cfg.variant == "none":
            return {}
        if self.cfg.variant == "eca":
            return {prefix + "w": self.params}
        return self.params.named(prefix)

    def state(self, prefix):
        if isinstance(self.params, CmcParams) and self.params.scales is not None:
            return {prefix + "scales": self.params.scales}
        return {}


class _Block:
    """Plain or residual conv block with the attention slot after norm2."""

    def __init__(self, spec, c_in, c_out, stride, dtype, rng, rng_attn, residual):
        self.residual = residual
        self.stride = stride
        self.w1 = _he_conv(rng, c_out, c_in, 3, 3, dtype)
        self.n1 = _Norm(c_out, spec.norm, dtype)
        self.w2 = None
        self.proj = None
        if residual:
            self.w2 = _he_conv(rng, c_out, c_out, 3, 3, dtype)
            self.n2 = _Norm(c_out, spec.norm, dtype)
            if stride != 1 or c_in != c_out:
                self.proj = _he_conv(rng, c_out, c_in, 1, 1, dtype)
        self.attn = _Attention(spec.attention, c_out, dtype, rng_attn)

    def __call__(self, x, train):
        h = ag.relu(self.n1(ag.conv2d(x, self.w1, stride=self.stride, pad=1), train))
        if not self.residual:
            return self.attn(h)
        h = self.n2(ag.conv2d(h, self.w2, stride=1, pad=1), train)
        h = self.attn(h)
        skip = x if self.proj is None else ag.conv2d(x, self.proj, stride=self.stride, pad=0)
        return ag.relu(ag.add(h, skip))

    def named(self, prefix):
        out = {prefix + "w1": self.w1}
        out.update(self.n1.named(prefix + "n1."))
        if self.w2 is not None:
            out[prefix + "w2"] = self.w2
            out.update(self.n2.named(prefix + "n2."))
        if self.proj is not None:
            out[prefix + "proj"] = self.proj
        out.update(self.attn.named(prefix + "attn."))
        return out

    def state(self, prefix):
        out = dict(self.n1.state(prefix + "n1."))
        if self.w2 is not None:
            out.update(self.n2.state(prefix + "n2."))
        out.update(self.attn.state(prefix + "attn."))
        return out


class Model:
    """Backbone + classifier; parameters addressable by name."""

    def __init__(self, spec, seed=0, dtype=np.float32):
        self.spec = spec
        self.seed = seed
        self.dtype = np.dtype(dtype).type
        self.step = 0
        rng = np.random.default_rng(seed)
        rng_attn = np.random.default_rng(seed + 1)  # keeps backbone draws variant-independent
        self.stem = _he_conv(rng, spec.stem_channels, spec.in_channels, 3, 3, self.dtype)
        self.stem_norm = _Norm(spec.stem_channels, spec.norm, self.dtype)
        self.stem_attn = None
        if spec.stem_attention:
            self.stem_attn = _Attention(spec.attention, spec.stem_channels,
                                        self.dtype, rng_attn)
        self.blocks = []
        c_in = spec.stem_channels
        for si, (n_b, c, stride) in enumerate(spec.stages):
            for bi in range(n_b):
                blk = _Block(spec, c_in, c, stride if bi == 0 else 1, self.dtype,
                             rng, rng_attn, residual=(spec.arch == "resnet"))
                blk._name = f"stage{si}.block{bi}."
                self.blocks.append(blk)
                c_in = c
        std = np.sqrt(2.0 / c_in)
        self.head_w = Tensor((rng.standard_normal((c_in, spec.classes)) * std).astype(self.dtype),
                             requires_grad=True)
        self.head_b = Tensor(np.zeros(spec.classes, dtype=self.dtype), requires_grad=True)

    def forward(self, x, train=False):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"input shape {x.shape} does not match stem ({self.spec.in_channels} channels)")
        h = ag.relu(self.stem_norm(ag.conv2d(x, self.stem, stride=self.spec.stem_stride, pad=1),
                                   train))
        if self.stem_attn is not None:
            h = self.stem_attn(h)
        for blk in self.blocks:
            h = blk(h, train)
        pooled = ag.reduce_spatial(h, "mean")
        return ag.linear(pooled, self.head_w, self.head_b)

    def predict(self, x):
        return np.argmax(self.forward(x).data, axis=1)

    def parameters(self):
        out = {"stem": self.stem}
        out.update(self.stem_norm.named("stem_norm."))
        if self.stem_attn is not None:
            out.update(self.stem_attn.named("stem_attn."))
        for blk in self.blocks:
            out.update(blk.named(blk._name))
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def state_arrays(self):
        out = dict(self.stem_norm.state("stem_norm."))
        if self.stem_attn is not None:
            out.update(self.stem_attn.state("stem_attn."))
        for blk in self.blocks:
            out.update(blk.state(blk._name))
        return out

    def param_count(self, attention_only=False):
        if attention_only:
            total = 0
            if self.stem_attn is not None:
                total += sum(int(np.prod(t.shape))
                             for t in self.stem_attn.named("").values())
            for blk in self.blocks:
                total += sum(int(np.prod(t.shape)) for t in blk.attn.named("").values())
            return total
        return sum(int(np.prod(t.shape)) for t in self.parameters().values())

    def zero_grad(self):
        for t in self.parameters().values():
            t.zero_grad()


def build(spec, seed=0, dtype=np.float32):
    return Model(spec, seed=seed, dtype=dtype)


def expected_attention_params(spec):
    """Closed-form attention parameter total for a model spec."""
    total = sum(n_b * attention_param_count(spec.attention, c) for n_b, c, _ in spec.stages)
    if spec.stem_attention:
        total += attention_param_count(spec.attention, spec.stem_channels)
    return total


# -- checkpoint I/O ----------------------------------------------------

@dataclass
class Checkpoint:
    tensors: dict        # name -> float32 ndarray
    step: int
    seed: int


def save(model, path):
    """Write all parameters and state as float32 little-endian."""
    tensors = {name: t.data for name, t in model.parameters().items()}
    tensors.update(model.state_arrays())
    tensors["meta/step"] = np.asarray([model.step], dtype=np.float32)
    tensors["meta/seed_lo"] = np.asarray([model.seed & 0xFFFF], dtype=np.float32)
    tensors["meta/seed_hi"] = np.asarray([(model.seed >> 16) & 0xFFFFFFFF], dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointTruncatedError(f"checkpoint truncated while reading {what}")
    return buf


def load(path):
    """Read a checkpoint file back into named arrays."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise CheckpointFormatError(f"bad magic bytes {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointVersionError(f"unknown checkpoint version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4, "dim"))[0] for _ in range(rank))
            size = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 4 * size, f"tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        extra = fh.read(1)
        if extra:
            raise CheckpointFormatError("trailing bytes after declared tensors")
    step = int(tensors.pop("meta/step", np.zeros(1))[0])
    lo = int(tensors.pop("meta/seed_lo", np.zeros(1))[0])
    hi = int(tensors.pop("meta/seed_hi", np.zeros(1))[0])
    return Checkpoint(tensors=tensors, step=step, seed=(hi << 16) | lo)


def restore(spec, ckpt, dtype=np.float32):
    """Rebuild a model from its spec and a loaded checkpoint."""
    model = Model(spec, seed=ckpt.seed, dtype=dtype)
    params = model.parameters()
    state = model.state_arrays()
    for name, arr in ckpt.tensors.items():
        if name in params:
            if params[name].shape != arr.shape:
                raise CheckpointFormatError(
                    f"tensor {name!r} shape {arr.shape} does not match model {params[name].shape}")
            params[name].data = arr.astype(model.dtype)
        elif name in state:
            state[name][...] = arr.astype(model.dtype)
        else:
            raise CheckpointFormatError(f"checkpoint tensor {name!r} unknown to this model spec")
    missing = set(params) - set(ckpt.tensors)
    if missing:
        raise CheckpointFormatError(f"checkpoint missing tensors: {sorted(missing)}")
    model.step = ckpt.step
    return model


def load_model(path, spec, dtype=np.float32):
    return restore(spec, load(path), dtype=dtype)
