"""SGD training loop, evaluation metrics, and the variant comparison runner."""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, softmax_cross_entropy
from .models import build, expected_attention_params, save

__all__ = [
    "TrainConfig", "MetricsRecord", "SweepRow", "TrainingDiverged",
    "sgd_step", "train", "evaluate", "run_variant_sweep", "write_metrics_csv",
]


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; message names the offending step."""


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 128
    lr_steps: tuple = (6, 8)     # epochs at which lr is multiplied by lr_decay
    lr_decay: float = 0.1
    flip_prob: float = 0.5
    seed: int = 0
    decay_attention: bool = True  # apply weight decay to attention parameters too

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0,1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if not 0.0 < self.lr_decay < 1.0:
            raise ValueError("lr decay factor must be in (0,1)")


@dataclass
class MetricsRecord:
    epoch: int
    loss: float
    top1: float
    top5: float
    wall_ms: float
    lr: float = 0.0


def sgd_step(params, state, lr, momentum, weight_decay, decay_mask=None):
    """v <- momentum*v + (grad + wd*param); param <- param - lr*v."""
    for name, t in params.items():
        if t.grad is None:
            continue
        g = t.grad
        if g.shape != t.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        wd = weight_decay if (decay_mask is None or decay_mask(name)) else 0.0
        if wd:
            g = g + wd * t.data
        v = state.get(name)
        if v is None:
            v = np.zeros_like(t.data)
        v = momentum * v + g
        state[name] = v
        t.data = t.data - lr * v


def _topk_hits(logits, labels, k):
    # ties broken toward the lower class index: stable sort on (-logit)
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


def evaluate(model, dataset, batch_size=256):
    """Top-1/top-5 accuracy over a dataset."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    t0 = time.perf_counter()
    hits1 = hits5 = 0
    loss_sum = 0.0
    for i in range(0, len(dataset), batch_size):
        xb = dataset.images[i:i + batch_size]
        yb = dataset.labels[i:i + batch_size]
        logits = model.forward(Tensor(xb.astype(model.dtype)))
        loss_sum += softmax_cross_entropy(logits, yb).item() * len(yb)
        hits1 += int(_topk_hits(logits.data, yb, 1).sum())
        hits5 += int(_topk_hits(logits.data, yb, min(5, dataset.classes)).sum())
    n = len(dataset)
    return MetricsRecord(epoch=0, loss=loss_sum / n, top1=100.0 * hits1 / n,
                         top5=100.0 * hits5 / n,
                         wall_ms=1000.0 * (time.perf_counter() - t0))


def train(model, dataset, cfg, eval_dataset=None, max_steps=None, log=None):
    """Run the step-decay SGD recipe; deterministic given (seed, config, data)."""
    from .data import augment

    params = model.parameters()
    attn_names = {n for n in params if ".attn." in n}
    mask = None if cfg.decay_attention else (lambda n: n not in attn_names)
    state = {}
    lr = cfg.lr
    records = []
    step = model.step
    for epoch in range(cfg.epochs):
        if epoch in cfg.lr_steps:
            lr *= cfg.lr_decay
        t0 = time.perf_counter()
        order = np.random.default_rng(cfg.seed * 100003 + epoch).permutation(len(dataset))
        images = dataset.images[order]
        labels = dataset.labels[order]
        images = augment(images, cfg.flip_prob, seed=cfg.seed * 99991 + epoch)
        loss_sum = 0.0
        hits = hits5 = 0
        seen = 0
        for i in range(0, len(dataset), cfg.batch_size):
            xb = images[i:i + cfg.batch_size].astype(model.dtype)
            yb = labels[i:i + cfg.batch_size]
            model.zero_grad()
            logits = model.forward(Tensor(xb), train=True)
            loss = softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (epoch {epoch}, offset {i})")
            loss.backward()
            sgd_step(params, state, lr, cfg.momentum, cfg.weight_decay, mask)
            loss_sum += loss.item() * len(yb)
            hits += int(_topk_hits(logits.data, yb, 1).sum())
            hits5 += int(_topk_hits(logits.data, yb, min(5, dataset.classes)).sum())
            seen += len(yb)
            step += 1
            if max_steps is not None and step - model.step >= max_steps:
                break
        wall = 1000.0 * (time.perf_counter() - t0)
        rec = MetricsRecord(epoch=epoch, loss=loss_sum / seen, top1=100.0 * hits / seen,
                            top5=100.0 * hits5 / seen, wall_ms=wall, lr=lr)
        if eval_dataset is not None:
            ev = evaluate(model, eval_dataset)
            rec.top1, rec.top5 = ev.top1, ev.top5
        records.append(rec)
        if log:
            log(f"epoch {epoch}: loss {rec.loss:.4f} top1 {rec.top1:.2f} "
                f"top5 {rec.top5:.2f} lr {lr:g} ({wall:.0f} ms)")
        if max_steps is not None and step - model.step >= max_steps:
            break
    model.step = step
    return records


def write_metrics_csv(path, records):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "loss", "top1", "top5", "wall_ms"])
        for r in records:
            wr.writerow([r.epoch, f"{r.loss:.6f}", f"{r.top1:.4f}",
                         f"{r.top5:.4f}", f"{r.wall_ms:.1f}"])


@dataclass
class SweepRow:
    name: str
    top1_mean: float
    top1_std: float
    params: int
    attention_params: int
    wall_ms: float
    top1_runs: tuple = field(default=())


def run_variant_sweep(specs, train_set, eval_set, cfg, seeds, csv_path=None, log=None):
    """Train each (name, ModelSpec) over the seed list; summarize top-1."""
    if not seeds:
        raise ValueError("at least one seed required")
    rows = []
    for name, spec in specs:
        accs = []
        wall = 0.0
        params = attn = 0
        for seed in seeds:
            run_cfg = TrainConfig(**{**cfg.__dict__, "seed": seed})
            model = build(spec, seed=seed)
            t0 = time.perf_counter()
            train(model, train_set, run_cfg, log=None)
            wall += 1000.0 * (time.perf_counter() - t0)
            acc = evaluate(model, eval_set).top1
            accs.append(acc)
            params = model.param_count()
            attn = model.param_count(attention_only=True)
            if log:
                log(f"{name} seed {seed}: top1 {acc:.2f}")
        rows.append(SweepRow(
            name=name, top1_mean=float(np.mean(accs)), top1_std=float(np.std(accs)),
            params=params, attention_params=attn, wall_ms=wall / len(seeds),
            top1_runs=tuple(accs)))
    for name, spec in specs:
        expected = expected_attention_params(spec)
        row = next(r for r in rows if r.name == name)
        assert row.attention_params == expected, \
            f"{name}: counted {row.attention_params} != closed form {expected}"
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["variant", "top1_mean", "top1_std", "params",
                         "attention_params", "wall_ms"])
            for r in rows:
                wr.writerow([r.name, f"{r.top1_mean:.4f}", f"{r.top1_std:.4f}",
                             r.params, r.attention_params, f"{r.wall_ms:.1f}"])
    return rows
